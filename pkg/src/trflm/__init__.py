"""Trans-dimensional random field language models.

Whole-sentence log-linear models over (length, sentence) pairs, trained by
joint stochastic approximation with trans-dimensional MCMC, plus perplexity,
n-best rescoring and model-combination utilities.
"""

from .corpus import ClassMap, EncodedCorpus, LengthPrior, Vocabulary, assign_classes, build_vocab, encode, length_stats
from .features import FeatureIndex, FeatureVector, TemplateSet, build_index, dot, extract
from .model import TrfModel
from .trainer import SaConfig, train

__version__ = "0.1.0"
