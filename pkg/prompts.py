#!/usr/bin/env python3
"""
Prompt templates with `{name}` placeholders.

Templates are plain text files in data/templates/ (overridable by config). Only `{word}` placeholders are
substituted, so JSON examples inside a template need no escaping. `{media}` is special: the rendered text is
split there and the clip's media reference becomes its own request part.

Usage:
  template = PromptTemplate(load_template("categorize"), required=("media", "steering"), name="categorize")
  parts = template.parts(media_uri="s3://bucket/clip.mp4", steering="", entities="...")

"""
__license__ = "MIT - https://mit-license.org/"

import os
import re

from gateway import Part

HERE = os.path.dirname(os.path.abspath(__file__))
TEMPLATES_DIR = os.path.join(HERE, "data", "templates")
PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class TemplateError(ValueError):
    """A template is missing a required placeholder."""


def template_path(name: str) -> str:
    """Path of a shipped default template, e.g. 'categorize' -> data/templates/categorize.txt"""
    return os.path.join(TEMPLATES_DIR, f"{name}.txt")


def load_template(name_or_path: str) -> str:
    path = name_or_path if os.path.sep in name_or_path or name_or_path.endswith(".txt") else template_path(name_or_path)
    with open(path, mode="r", encoding="utf-8") as fh:
        return fh.read()


def substitute(text: str, values: dict) -> str:
    return PLACEHOLDER.sub(lambda m: str(values[m.group(1)]) if m.group(1) in values else m.group(0), text)


class PromptTemplate:

    def __init__(self, text: str, required: tuple = (), name: str = "prompt"):
        """
        text (str): the template text
        required (tuple): placeholder names that must appear in the text
        name (str): the template name, for error messages
        """
        assert text is not None, "template text is None"
        self.text = text
        self.name = name
        missing = [placeholder for placeholder in required if placeholder not in self.placeholders]
        if missing:
            raise TemplateError(f"{name} template is missing {', '.join('{' + m + '}' for m in missing)}")

    @property
    def placeholders(self) -> set[str]:
        return set(PLACEHOLDER.findall(self.text))

    def fill(self, **values) -> str:
        """Substitutes the given values. Placeholders without a value are left in place."""
        return substitute(self.text, values)

    def parts(self, media_uri: str = None, **values) -> tuple[Part, ...]:
        """
        Renders the template into request parts: text, with a media part wherever `{media}` was.
        Without a `{media}` placeholder the media part (if any) comes first.
        The template is split before values are substituted, so a value never adds a media part.
        """
        pieces = [substitute(piece, values) for piece in self.text.split("{media}")]
        parts = []
        if media_uri is not None and len(pieces) == 1:
            parts.append(Part.media(media_uri))
        for i, piece in enumerate(pieces):
            text = piece.strip()
            if text:
                parts.append(Part.text(text))
            if i < len(pieces) - 1:
                if media_uri is None:
                    raise TemplateError(f"{self.name} template has {{media}} but no media reference was given")
                parts.append(Part.media(media_uri))
        return tuple(parts)
