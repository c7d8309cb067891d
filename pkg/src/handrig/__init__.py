"""Multi-view hand-pose annotation engine.

Forward-kinematics hand model, marker-cube camera calibration with RANSAC
consensus, Levenberg-Marquardt skeleton fitting against weighted 2D joint
detections, a paired occluded/clean capture protocol, MLP heads for
2D-to-3D lifting and grasp classification, and PCK/AUC evaluation, driven
by a synthetic detection oracle.
"""

__version__ = "0.1.0"
