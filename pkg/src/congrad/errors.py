class ConfigError(ValueError):
    """A run or stream configuration is invalid or references missing inputs."""
