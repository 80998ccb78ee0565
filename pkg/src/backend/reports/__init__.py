"""Report templates package for Meta-3DSeg."""