# Test package for fishmerge
