"""Run logs, caption records and ablation tables."""
