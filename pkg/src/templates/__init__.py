"""Templates package for report generation."""
