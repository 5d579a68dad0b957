"""Pure-DP robust mean estimation."""
