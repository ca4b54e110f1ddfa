"""Networked self-supervised traffic-camera predictors, simulated at desk scale."""
