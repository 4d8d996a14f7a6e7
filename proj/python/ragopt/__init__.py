"""Retrieval gating for a FAQ chatbot: embedding head, fetch policy, savings harness."""

from ._core import (
    ParseError,
    RagoptError,
    ValidationError,
    cosine,
    count_tokens,
    decide,
    default_config,
    discounted_returns,
    embed,
    embed_train,
    parse_state,
    policy_train,
    report,
    retrieve,
    reward,
    serialize_state,
    simulate,
)

__all__ = [
    "ParseError",
    "RagoptError",
    "ValidationError",
    "cosine",
    "count_tokens",
    "decide",
    "default_config",
    "discounted_returns",
    "embed",
    "embed_train",
    "parse_state",
    "policy_train",
    "report",
    "retrieve",
    "reward",
    "serialize_state",
    "simulate",
]
