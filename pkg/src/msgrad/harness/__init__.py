"""Tasks, experiments and file formats."""
