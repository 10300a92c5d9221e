"""Real-time adaptive pooling for online EEG decoding."""
