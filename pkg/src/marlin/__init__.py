"""Masked facial-video autoencoder with region-guided masking and adversarial reconstruction."""

from .data import ClipSpec, DatasetManifest, ManifestEntry, MotionParams, VideoClip, load_clip, synth_face_clip
from .masking import MaskPlan, fasking, make_plan
from .model import Marlin, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .tokenizer import TokenBatch, TokenGridSpec, patchify, unpatchify
from .training import TrainConfig, adapt_downstream, evaluate, lr_at, pretrain, pretrain_step

__version__ = "0.1.0"
