"""Training, evaluation, ablation, reporting and the command line."""
