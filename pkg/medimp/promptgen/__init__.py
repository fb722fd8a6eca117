from medimp.promptgen.bank import (
    CANONICAL_SLOTS,
    AugmentationBank,
    ClauseTemplate,
    Variant,
    load_bank,
    render,
    render_clauses,
    scan,
)
from medimp.promptgen.generate import (
    check_leakage,
    expand_prompts,
    generate_prompts,
    read_prompts_jsonl,
    render_all_variants,
    write_prompts_jsonl,
)
from medimp.promptgen.rules import CategorizationRule, RuleSet, categorize, creat_trend, load_rules, record_labels
from medimp.promptgen.vocab import (
    TokenizedText,
    Vocabulary,
    build_vocab,
    detokenize,
    split_words,
    tokenize,
    tokenize_batch,
)

__all__ = [
    "AugmentationBank",
    "CANONICAL_SLOTS",
    "CategorizationRule",
    "ClauseTemplate",
    "RuleSet",
    "TokenizedText",
    "Variant",
    "Vocabulary",
    "build_vocab",
    "categorize",
    "check_leakage",
    "creat_trend",
    "detokenize",
    "expand_prompts",
    "generate_prompts",
    "load_bank",
    "load_rules",
    "read_prompts_jsonl",
    "record_labels",
    "render",
    "render_all_variants",
    "render_clauses",
    "scan",
    "split_words",
    "tokenize",
    "tokenize_batch",
    "write_prompts_jsonl",
]
