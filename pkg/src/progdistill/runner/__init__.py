"""Configuration, checkpoints, orchestration, ablations, reports and the CLI."""
