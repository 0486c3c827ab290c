# Test suite package
