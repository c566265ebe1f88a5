"""Robust iterated next-frame video prediction.

Uncertainty-aware losses, attention skip connections, cycle training and
video metrics, built on PyTorch.
"""

__version__ = "0.1.0"

from .losses import (FeatureStack, GaussianImage, LossWeights, deep_perceptual_loss,
                     gaussian_nll, kl_gaussians, kl_uncertainty_loss, latent_kl, total_loss)
from .features import TapSpec, VideoEmbedder, embed_video, extract_features
from .predictor import (AttentionSkip, FrameSequence, LatentSample, Predictor, PredictorConfig,
                        SkipConfig, attention_skip, load_checkpoint, save_checkpoint)
from .training import (CycleSchedule, TrainConfig, cycle_losses, cycle_steps_for_epoch, fit,
                       training_step)
from .data import (SequenceDataset, SyntheticSpec, TransformSpec, load_directory_dataset,
                   make_synthetic_dataset, sample_window)
from .metrics import (GaussianStats, MetricReport, frechet_distance, fvd, gaussian_stats, mse,
                      perceptual_distance, psnr)
