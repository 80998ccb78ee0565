"""Meta-3DSeg package."""