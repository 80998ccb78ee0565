"""Test package for Meta-3DSeg."""