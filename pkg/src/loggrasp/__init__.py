"""Forestry-crane log grasping: kinematics, simulator, environment and mPPO."""

__version__ = "0.1.0"
