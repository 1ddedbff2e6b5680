# Pure tensor and numpy tools
