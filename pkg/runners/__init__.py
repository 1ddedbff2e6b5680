# Training, sampling and pipeline orchestration
