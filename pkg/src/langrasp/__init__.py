"""Language-conditioned target grasping in a synthetic cluttered tabletop.

A frozen synthetic vision-language encoder and a geometric grasp proposer
feed a cross-attention policy over per-grasp features, trained with
discrete soft actor-critic under a two-stage curriculum.
"""

from .autodiff import Tensor, no_grad
from .config import ConfigError, config_hash, load_config
from .encoder import (AlignedEncoder, ConceptBasis, basis_from_vocabulary,
                      fuse_visual_language, fuse_visual_position,
                      ground_probabilities)
from .grasps import (GraspPose, MappingMatrix, box_grasp_mapping,
                     grasp_feature_encode, grounding_prior, propose_grasps)
from .library import KeywordTable, ObjectSpec, load_keywords, load_library
from .nn import (Adam, ConfigurationError, CrossAttention, Linear, MLP,
                 NumericsError, cross_attention_forward, grad_check,
                 mlp_forward, positional_encoding, softmax)
from .policy import (FusionPolicy, NoBoxesError, NoGraspsError, PolicyConfig,
                     kl_guided_loss, load_checkpoint, save_checkpoint,
                     select_action)
from .runtime import Setup
from .sac import (ReplayBuffer, Trainer, Transition, actor_objective,
                  critic_target, policy_entropy, soft_state_value,
                  train_curriculum)
from .world import (Episode, EpisodeFinished, GraspOutcome, Instruction,
                    ObjectBox, Observation, PlacementError, Scene, Workspace,
                    compute_reward, detect_boxes, execute_grasp,
                    sample_instruction, sample_scene)

__version__ = "0.1.0"
