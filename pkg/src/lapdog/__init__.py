"""Persona dialogue generation with a story retriever trained from metric feedback."""
from .corpus import Corpus, DialogueSample, Story, Turn, build_samples, first_personify, load_stories, make_query
from .generator import FiDInput, Seq2SeqModel, assemble_fid, generate, nll
from .retriever import StoryIndex, TextEncoder, build_index, candidate_augment, embed, retrieve
from .textmetrics import MetricBundle, corpus_bleu, guidance_metric, rouge_l, sentence_bleu, token_f1
from .trainer import (GuidanceDistribution, StepReport, TrainConfig, evaluate, guidance_distribution,
                      retriever_loss, stage2_step, train_stage1, train_stage2)

__version__ = "0.1.0"

__all__ = [
    "Corpus", "DialogueSample", "Story", "Turn", "build_samples", "first_personify", "load_stories",
    "make_query", "FiDInput", "Seq2SeqModel", "assemble_fid", "generate", "nll", "StoryIndex",
    "TextEncoder", "build_index", "candidate_augment", "embed", "retrieve", "MetricBundle", "corpus_bleu",
    "guidance_metric", "rouge_l", "sentence_bleu", "token_f1", "GuidanceDistribution", "StepReport",
    "TrainConfig", "evaluate", "guidance_distribution", "retriever_loss", "stage2_step", "train_stage1",
    "train_stage2",
]
