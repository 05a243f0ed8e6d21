from .encoder import ClinicalBackboneAdapter, TextEmbedding, TextEncoder, TextFeatures, encode_text
from .prompt import OOV_ID, PAD_ID, TextPrompt, Vocabulary, tokenize, words

__all__ = [
    "ClinicalBackboneAdapter", "OOV_ID", "PAD_ID", "TextEmbedding", "TextEncoder", "TextFeatures",
    "TextPrompt", "Vocabulary", "encode_text", "tokenize", "words",
]
