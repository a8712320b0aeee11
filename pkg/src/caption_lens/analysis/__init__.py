"""Caption scoring and region attribution."""
