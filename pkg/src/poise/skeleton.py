"""Canonical 16-joint skeleton used everywhere in this package.

Joint order is fixed (MPII-style, compatible with the usual 16-joint subsets
of motion-capture datasets). Every keypoint file, checkpoint, and generator
in this repo assumes this order; converters for other conventions live with
their dataset adapters, not here.
"""

JOINT_NAMES = (
    "right_ankle",    # 0
    "right_knee",     # 1
    "right_hip",      # 2
    "left_hip",       # 3
    "left_knee",      # 4
    "left_ankle",     # 5
    "pelvis",         # 6
    "thorax",         # 7
    "upper_neck",     # 8
    "head_top",       # 9
    "right_wrist",    # 10
    "right_elbow",    # 11
    "right_shoulder", # 12
    "left_shoulder",  # 13
    "left_elbow",     # 14
    "left_wrist",     # 15
)

NUM_JOINTS = len(JOINT_NAMES)

JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}

# Edges grouped by body part; the groups carry different rasterization radii.
TORSO_EDGES = (
    (6, 7),    # pelvis - thorax
)
HEAD_EDGES = (
    (7, 8),    # thorax - upper_neck
    (8, 9),    # upper_neck - head_top
)
LIMB_EDGES = (
    (6, 2), (2, 1), (1, 0),      # right leg
    (6, 3), (3, 4), (4, 5),      # left leg
    (7, 12), (12, 11), (11, 10), # right arm
    (7, 13), (13, 14), (14, 15), # left arm
)

SKELETON_EDGES = TORSO_EDGES + HEAD_EDGES + LIMB_EDGES

SKELETON_NAME = "mpii16"
