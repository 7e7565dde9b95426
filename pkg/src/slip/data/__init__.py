from .augment import AugmentConfig, CropConfig, SslAugmentConfig, clip_view, eval_view, global_crop, probe_view, ssl_augment
from .batching import Batch, DataPipeline, ViewBundle, make_batch
from .bpe import BOS, EOS, PAD, BpeVocab, TokenSequence, bpe_decode, bpe_encode, bpe_train, stack_tokens
from .manifest import CorpusManifest, Record, load_image, read_lines, read_manifest, save_image, write_manifest
from .synth import SynthSpec, synth_generate
from .text import clean_caption, sample_caption
