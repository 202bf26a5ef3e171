# Planner Services Package
