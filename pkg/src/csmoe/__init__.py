"""Code-switching speech recognition with a task-routed speech-translation auxiliary."""

__version__ = "0.1.0"
