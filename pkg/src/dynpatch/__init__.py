"""Scene-conditioned adversarial patch generation for object detectors.

The package covers a differentiable scene simulator, attack and stealth
objectives, a lambda-conditioned generator trained with skewness-driven task
weighting, a toy victim detector, evaluation utilities and a CLI.
"""
from .conditioning import LambdaBatch, LambdaEmbedding, sample_lambda
from .controller import AlphaState, StreamingStats, skewness_of, step_alpha, update_stats
from .evaluator import EvalReport, ad_curve, average_precision, eval_run, pgd_eot_baseline, ssim
from .generator import GeneratorConfig, PatchGenerator, decode_patch, encode_natural, encode_scene
from .objectives import attack_loss, gcatk_loss, invisibility_loss, latent_reg, total_variation
from .scene_sim import PRESETS, SceneState, TransformParams, apply_patch, build_observation, sample_theta
from .trainer import TrainConfig, TrainState, train, train_step
from .victim import Detection, DetectorInterface, ToyDetector, postprocess_filter, train_toy_detector

__version__ = "0.1.0"
