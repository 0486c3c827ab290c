# Synthetic scene generation and the dataset file format
