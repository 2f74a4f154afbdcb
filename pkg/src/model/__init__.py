# Model package