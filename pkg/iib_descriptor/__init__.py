__version__ = '0.1.0'

from .channels import ChannelStack, compute_channels, select_channels
from .descriptor import (
    BinaryDescriptor, DescriptorConfig, DescriptorSet, descriptor_size, extract, layout_patches
)
from .matching import brute_force_mutual, hamming, hierarchical_match
from . import ops, selection, evaluation, baseline, utils
