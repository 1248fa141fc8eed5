"""Two-stage heterogeneous-object manipulation: correspondence-guided grasping plus a
multi-provider diffusion policy, with a desk-scale synthetic simulator."""

__version__ = "0.1.0"
