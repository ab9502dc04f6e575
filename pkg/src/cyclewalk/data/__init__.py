from .augment import BACKWARD_PRESET, FORWARD_PRESET, NO_AUG, ColorAugConfig, color_augment
from .clipio import load_clip, read_manifest, save_clip, write_manifest
from .pnm import read_frame, write_frame
from .synthetic import ClipConfig, Scene, SyntheticClip, generate_clip, render_clip, sample_scene

__all__ = [
    "BACKWARD_PRESET", "FORWARD_PRESET", "NO_AUG", "ColorAugConfig", "color_augment",
    "load_clip", "read_manifest", "save_clip", "write_manifest", "read_frame", "write_frame",
    "ClipConfig", "Scene", "SyntheticClip", "generate_clip", "render_clip", "sample_scene",
]
