"""Risk-aware arm planning through normalized Gaussian splat scenes.

Submodules
----------
scene       splat scenes, density, transmittance, file formats
risk        closed-form collision-probability bound and gradients
polyzono    polynomial zonotope arithmetic
trajectory  accelerate-then-brake trajectories and their enclosures
arm         kinematics and spherical forward occupancy
planner     chance-constrained receding-horizon planner
scenegen    random box scenes and ground-truth geometry
baselines   competing collision checkers and the classifier harness
raster      differentiable normalized-splat rasterizer
cli         command line entry point
"""

__version__ = "0.1.0"
