# Configuration models and run presets
