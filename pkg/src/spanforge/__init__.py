"""spanforge: a desk-scale span-corruption encoder-decoder toolkit for proteins."""

from spanforge.corpus import VOCAB, SequenceRecord, Vocabulary

__version__ = "0.1.0"

__all__ = ["VOCAB", "SequenceRecord", "Vocabulary", "__version__"]
