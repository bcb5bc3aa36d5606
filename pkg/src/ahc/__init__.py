"""Feature-level continual replay with MAML-adapted compression under a byte budget."""
from .compressor import (SCALES, MamlConfig, Scale, ScaleConfig, SupportQuerySplit, decode,
                         encode, init_params, make_hierarchy, maml_adapt, meta_gradient,
                         meta_train, recon_grad, recon_loss)
from .memory import (FeatureRecord, ImportanceWeights, MemoryBank, deserialize, importance,
                     mean_pool, serialize)

__version__ = "0.1.0"
