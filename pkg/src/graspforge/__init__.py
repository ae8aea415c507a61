"""Planar grasp-affordance toolkit: antipodal trial collection, pixelwise
affordance network training, and rotation-stack grasp planning, validated
against an analytic antipodal oracle in the same 2D simulator."""

__version__ = "0.1.0"
