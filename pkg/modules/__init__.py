# Model, training and evaluation modules
