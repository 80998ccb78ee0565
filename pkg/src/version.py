#!/usr/bin/env python3
"""
Version information for Meta-3DSeg.
"""

# Version numbering scheme:
# major.minor.patch
# - major: Changes to the checkpoint or manifest formats
# - minor: New training modes, experiments or CLI commands
# - patch: Bug fixes and small enhancements

__version__ = "0.3.0"

# Bumped whenever the binary checkpoint layout changes
CHECKPOINT_FORMAT_VERSION = 1


def get_version():
    """Return the current version string."""
    return __version__


def get_version_info():
    """
    Get the version information as a dictionary.

    Returns:
        Dictionary containing version components and the checkpoint format
    """
    major, minor, patch = map(int, __version__.split("."))
    return {
        "version": __version__,
        "major": major,
        "minor": minor,
        "patch": patch,
        "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
    }
