"""Robust projection onto GAN image manifolds via corruption mimicking."""

from .data_io import (Dataset, SplitSpec, load_dataset, make_split, resize_images,
                      generate_synthetic)
from .generator_zoo import (GanConfig, GeneratorCheckpoint, ClassifierConfig,
                            ClassifierCheckpoint, train_gan, train_classifier,
                            generate, discriminate, save_gan_checkpoint,
                            load_gan_checkpoint, param_checksum)
from .corruption_zoo import (CorruptionSpec, UniversalPerturbation, apply_corruption,
                             fgsm_attack, build_universal_perturbation, apply_universal)
from .surrogate import CorruptionSurrogate, stl_warp, init_surrogate, identity_surrogate
from .projector import (ProjectorConfig, ProjectionResult, LossBreakdown, init_latents,
                        clip_latent, compute_loss, pgd_project, known_f_project,
                        mimicgan_project, encoder_baseline_project, project)
from .metrics import MetricRecord, reprojection_error, auroc, nn_classify_accuracy

__version__ = "0.1.0"
