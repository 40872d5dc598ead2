"""Multi-lead ECG multi-label classification with a patch-based waveform transformer."""

__version__ = "0.1.0"
