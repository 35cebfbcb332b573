"""Formula, robustness, monitoring, guidance, dynamics and planner modules."""
