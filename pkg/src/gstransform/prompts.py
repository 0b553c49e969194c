"""Prompt templates and reply parsers for the three annotation calls.

Templates live in ``templates/*.txt`` and are rendered with a single-pass
placeholder substitution, so braces inside user text are never expanded.
"""
import logging
import re
from functools import lru_cache
from importlib import resources

from .errors import ParseFailure

log = logging.getLogger(__name__)

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


@lru_cache(maxsize=None)
def load_template(name):
    text = resources.files(__package__).joinpath("templates").joinpath(f"{name}.txt").read_text("utf-8")
    return text[:-1] if text.endswith("\n") else text


def render(name, **fields):
    template = load_template(name)
    missing = set(_PLACEHOLDER.findall(template)) - set(fields)
    if missing:
        raise KeyError(f"template {name!r} needs fields {sorted(missing)}")
    return _PLACEHOLDER.sub(lambda m: str(fields[m.group(1)]), template)


def bullet_list(items):
    """Render items one per line with a ``- `` prefix, starting on a new line."""
    return "".join(f"\n- {item}" for item in items)


def render_summarize(instruction, text):
    return render("summarize", instruction=instruction, text=text)


def render_generate_label(instruction, positive_texts, negative_texts):
    return render(
        "generate_label",
        instruction=instruction,
        positive_texts=bullet_list(positive_texts),
        negative_texts=bullet_list(negative_texts),
    )


def render_classify(instruction, categories, text):
    return render("classify", instruction=instruction, categories=bullet_list(categories), text=text)


def render_directed_labels(instruction, texts, k):
    return render("directed_labels", instruction=instruction, texts=bullet_list(texts), k=k)


def parse_marker(reply, marker):
    """Return the payload of the first line starting with ``marker:``.

    Whitespace around the marker and colon, marker case and markdown
    emphasis (``**Summary:**``) are tolerated. An absent marker or an empty
    payload raises :class:`ParseFailure` carrying the raw reply.
    """
    pattern = re.compile(rf"^\s*[*_#]*\s*{re.escape(marker)}\s*[*_]*\s*:[*_]*(.*)$", re.IGNORECASE)
    for line in (reply or "").splitlines():
        m = pattern.match(line)
        if m:
            payload = m.group(1).strip().strip("*_").strip()
            if payload:
                return payload
            break
    raise ParseFailure(f"no {marker!r} line in reply", raw=reply)


def _word_check(value, limit, what):
    if len(value.split()) > limit:
        log.info("%s exceeds %d words: %r", what, limit, value)
    return value


def parse_summary(reply):
    return _word_check(parse_marker(reply, "Summary"), 10, "summary")


def parse_category(reply):
    return _word_check(parse_marker(reply, "Category"), 5, "category label")


def parse_classification(reply):
    return parse_marker(reply, "Classification")


_NUMBERED = re.compile(r"^\s*(\d+)[.)]\s*(.+?)\s*$")


def parse_numbered_list(reply):
    items = []
    for line in (reply or "").splitlines():
        m = _NUMBERED.match(line)
        if m:
            items.append(m.group(2))
    if not items:
        raise ParseFailure("no numbered list in reply", raw=reply)
    return items
