from .layouts import GridLayout, Heading, generate_layout, generate_layouts, layout_hash, load_layout_dir
from .gridnav import GridNavEnv, NavAction, AgentPose, EpisodeResult, compute_spl, geodesic_distance
