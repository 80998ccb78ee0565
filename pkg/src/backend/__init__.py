"""Backend package for Meta-3DSeg."""