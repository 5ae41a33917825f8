"""Soft-phantom FEM replay with learned top-surface corrections."""
from .errors import *  # noqa: F401,F403
from .mesh import GridMeshSpec, TetMesh, build_grid_mesh, load_mesh, save_mesh, supersample_surface
from .fem import FemSimulator, FemState, MaterialParams, ProbeSphere, SolverConfig, run_replay
from .replay import FrameSchedule, KinematicsTrajectory, interpolate, subsample_to_frames
from .registration import IcpConfig, RigidTransform, fit_rigid, icp_register
from .pointcloud import FilterConfig, PointCloud, chamfer_one_directional, filter_cloud, hausdorff
from .correction import CorrectionModel, TrainConfig, UNetConfig, apply_correction, build, evaluate_rollout, forward, train
from .synth import DatasetSpec, ProbeScript, SceneTruth, generate_trajectory, make_dataset, render_observation
from .search import SearchSpec, coarse_search, fine_search

__version__ = "0.1.0"
