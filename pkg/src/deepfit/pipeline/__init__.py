"""Staged fitting, flow infill, temporal smoothing and re-estimation."""
