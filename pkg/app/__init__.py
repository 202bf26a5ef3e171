# DiffusionPipe Planner Application Package
