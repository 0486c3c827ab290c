# Command-line command implementations
