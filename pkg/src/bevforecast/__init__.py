"""Bird's-eye-view occupancy grids, a ConvLSTM trajectory forecaster and a Bayes-filter baseline."""
