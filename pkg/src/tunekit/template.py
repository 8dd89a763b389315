"""Dataset records, chat template rendering, byte tokenization and loss weights.

Records follow the standard JSONL format with the keys `system`, `query`,
`response`, `history`, `tools`, `rejected_response`, `images`, `objects` and
the optional extensions `image_sizes` and `response_weight`.

The default template wraps turns as

    <|im_start|>system\\n{system}<|im_end|>\\n
    <|im_start|>user\\n{query}<|im_end|>\\n
    <|im_start|>assistant\\n{response}<|im_end|>\\n

where the assistant text (including its closing marker) is trained.
"""

# pylint: disable-msg=too-many-instance-attributes

import json
import re
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np
from loguru import logger as log

from .common import read_jsonl, round_half_away, split_limit_suffix, write_jsonl
from .exceptions import DatasetError, SampleTooLongError, TemplateError
from .tensor import IGNORE_INDEX


BBOX_TYPES = ("real", "norm_1000", "norm_1")
TOOL_PROMPT_STYLES = ("react", "toolbench")
IMAGE_TOKEN = "<image>"

KNOWN_KEYS = (
    "system",
    "query",
    "response",
    "history",
    "tools",
    "rejected_response",
    "images",
    "objects",
    "image_sizes",
    "response_weight",
)

REACT_INSTRUCTION = (
    "Answer the following questions as best you can. "
    "You have access to the following tools:\n\n"
    "{tool_lines}\n\n"
    "Use the following format:\n\n"
    "Thought: you should always think about what to do\n"
    "Action: the action to take, should be one of [{tool_names}]\n"
    "Action Input: the input to the action\n"
    "Observation: the result of the action\n"
    "... (this Thought/Action/Action Input/Observation can be repeated "
    "zero or more times)\n"
    "Thought: I now know the final answer\n"
    "Final Answer: the final answer to the original input question"
)
"""Tool instruction appended to the system block in `react` style."""

TOOLBENCH_INSTRUCTION = (
    "You can use the following tools, call one by answering with its name "
    "and JSON arguments:\n{tool_lines}"
)
"""Tool instruction appended to the system block in `toolbench` style."""

FIELD_WEIGHTS = (
    ("Action Input:", 3.0),
    ("Action:", 3.0),
    ("Name:", 3.0),
    ("Tool:", 3.0),
    ("Arguments:", 3.0),
    ("Command:", 3.0),
    ("Command", 3.0),
)
"""Agent field markers whose line content gets an increased loss weight."""

OBSERVATION_MARKER = "Observation:"
OBSERVATION_WEIGHT = 2.0

_FIELD_RE = re.compile(
    r"^[ \t]*(" + "|".join(re.escape(m) for m, _ in FIELD_WEIGHTS) + r")([^\n]*)",
    re.MULTILINE,
)
_OBSERVATION_RE = re.compile(r"^[ \t]*" + re.escape(OBSERVATION_MARKER), re.MULTILINE)


@dataclass
class GroundingObject:

    """One grounded object of a record."""

    caption: str
    bbox: List[float]
    bbox_type: str = "real"
    image: int = 0


@dataclass
class StandardRecord:

    """A single dataset sample.

    Attributes
    ----------
    query : str
    response : str
    system : str or None
    history : list(list(str))
        Earlier `[query, response]` pairs, oldest first.
    tools : list(dict) or None
    rejected_response : str or None
    images : list(str)
    objects : list(GroundingObject)
    image_sizes : list(list(int))
        `[width, height]` per image.
    response_weight : float or None
        Record level weight of the assistant text.
    extra : dict
        Unknown keys, preserved but not interpreted.
    """

    query: str = ""
    response: str = ""
    system: Optional[str] = None
    history: List[List[str]] = field(default_factory=list)
    tools: Optional[list] = None
    rejected_response: Optional[str] = None
    images: List[str] = field(default_factory=list)
    objects: List[GroundingObject] = field(default_factory=list)
    image_sizes: List[List[int]] = field(default_factory=list)
    response_weight: Optional[float] = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, obj, require_query=True):
        """Create and validate a record from a parsed JSON object.

        Raises
        ------
        DatasetError
            Raised for missing or malformed fields.
        """
        objects = obj.get("objects") or []
        if isinstance(objects, str):
            try:
                objects = json.loads(objects)
            except json.JSONDecodeError as err:
                raise DatasetError(f"'objects' is not valid JSON: {err}") from err
        record = cls(
            query=obj.get("query") or "",
            response=obj.get("response") or "",
            system=obj.get("system"),
            history=[list(pair) for pair in obj.get("history") or []],
            tools=obj.get("tools"),
            rejected_response=obj.get("rejected_response"),
            images=list(obj.get("images") or []),
            objects=[GroundingObject(**o) for o in objects],
            image_sizes=[list(s) for s in obj.get("image_sizes") or []],
            response_weight=obj.get("response_weight"),
            extra={k: v for k, v in obj.items() if k not in KNOWN_KEYS},
        )
        return record.validate(require_query)

    def validate(self, require_query=True):
        """Check the record invariants, raising a `DatasetError`."""
        if require_query and not self.query:
            raise DatasetError("Record has no query")
        for pair in self.history:
            if len(pair) != 2 or not all(isinstance(turn, str) for turn in pair):
                raise DatasetError(
                    f"History entries must be [query, response] pairs: {pair}"
                )
        rejected = self.rejected_response
        if rejected is not None and rejected == self.response:
            raise DatasetError("rejected_response equals response")
        for obj in self.objects:
            if obj.bbox_type not in BBOX_TYPES:
                raise DatasetError(f"Unknown bbox_type '{obj.bbox_type}'")
            if len(obj.bbox) != 4:
                raise DatasetError(f"bbox needs 4 numbers, got {obj.bbox}")
            x1, y1, x2, y2 = obj.bbox
            if x1 > x2 or y1 > y2:
                raise DatasetError(f"bbox corners out of order: {obj.bbox}")
            if obj.image >= len(self.images):
                raise DatasetError(
                    f"Object '{obj.caption}' refers to image {obj.image}, "
                    f"record has {len(self.images)}"
                )
        return self

    def to_dict(self):
        """The record in the standard JSONL shape, unset optional keys omitted."""
        out = {"query": self.query, "response": self.response}
        if self.system is not None:
            out["system"] = self.system
        if self.history:
            out["history"] = [list(pair) for pair in self.history]
        if self.tools is not None:
            out["tools"] = self.tools
        if self.rejected_response is not None:
            out["rejected_response"] = self.rejected_response
        if self.images:
            out["images"] = list(self.images)
        if self.objects:
            out["objects"] = [asdict(o) for o in self.objects]
        if self.image_sizes:
            out["image_sizes"] = [list(s) for s in self.image_sizes]
        if self.response_weight is not None:
            out["response_weight"] = self.response_weight
        out.update(self.extra)
        return out


def parse_jsonl(path, require_query=True):
    """Read a dataset file into records.

    Parameters
    ----------
    path : str
        File path, optionally with a `#N` suffix to take the first N records.
    require_query : bool, optional
        If False records without a query (pre-training text) are accepted,
        by default True.

    Returns
    -------
    list(StandardRecord)

    Raises
    ------
    DatasetError
        Raised for malformed lines or records, naming the line number.
    """
    plain, limit = split_limit_suffix(path)
    records = []
    for lineno, obj in read_jsonl(plain):
        if limit is not None and len(records) >= limit:
            break
        try:
            records.append(StandardRecord.from_dict(obj, require_query))
        except (DatasetError, TypeError) as err:
            msg = f"Invalid record in [{plain}] line {lineno}: {err}"
            log.error(msg)
            raise DatasetError(msg) from err
    log.debug("Parsed {} records from [{}]", len(records), path)
    return records


def record_from_messages(messages, tools=None):
    """Build a record from OpenAI style chat messages ending with a user turn.

    Raises
    ------
    TemplateError
        Raised for unknown roles or a conversation not ending with the user.
    """
    system = None
    turns = []
    for idx, message in enumerate(messages):
        role, content = message["role"], message["content"]
        if role not in ("system", "user", "assistant"):
            raise TemplateError(f"Unsupported role '{role}'")
        if role == "system":
            if idx != 0:
                raise TemplateError("A system message is only allowed first")
            system = content
        else:
            turns.append((role, content))
    if not turns or turns[-1][0] != "user":
        raise TemplateError("The last message must come from the user")
    history = []
    pending = None
    for role, content in turns[:-1]:
        if role == "user":
            if pending is not None:
                raise TemplateError("Two consecutive user messages")
            pending = content
        else:
            if pending is None:
                raise TemplateError(
                    "Assistant message without a preceding user message"
                )
            history.append([pending, content])
            pending = None
    if pending is not None:
        raise TemplateError("Two consecutive user messages")
    return StandardRecord(
        query=turns[-1][1], system=system, history=history, tools=tools
    )


def convert_bbox(bbox, from_type, to_type, image_size=None):
    """Convert box coordinates between the `real`, `norm_1000` and `norm_1` types.

    `real` holds pixel values, `norm_1000` thousandths of the image size
    (rounded half away from zero) and `norm_1` unit-normalized reals. The x
    coordinates use the width, the y coordinates the height.

    Parameters
    ----------
    bbox : list(float)
        `[x1, y1, x2, y2]`.
    from_type : str
    to_type : str
    image_size : (int, int), optional
        `(width, height)`, required unless both types are equal.

    Returns
    -------
    list
        The converted box (integers for `norm_1000`).

    Raises
    ------
    TemplateError
        Raised for unknown types, missing image dimensions or coordinates
        outside their range.
    """
    for kind in (from_type, to_type):
        if kind not in BBOX_TYPES:
            raise TemplateError(f"Unknown bbox_type '{kind}', use one of {BBOX_TYPES}")
    if len(bbox) != 4:
        raise TemplateError(f"bbox needs 4 numbers, got {bbox}")
    if from_type == to_type:
        return list(bbox)
    if image_size is None:
        msg = "bbox conversion requires image dimensions"
        log.error(msg)
        raise TemplateError(msg)

    width, height = image_size
    dims = (width, height, width, height)
    limits = {"real": dims, "norm_1000": (1000,) * 4, "norm_1": (1,) * 4}[from_type]
    for value, limit in zip(bbox, limits):
        if value < 0 or value > limit:
            raise TemplateError(
                f"bbox coordinate {value} outside [0, {limit}] for type {from_type}"
            )

    if from_type == "norm_1000":
        real = [v * d / 1000.0 for v, d in zip(bbox, dims)]
    elif from_type == "norm_1":
        real = [v * d for v, d in zip(bbox, dims)]
    else:
        real = [float(v) for v in bbox]

    if to_type == "norm_1000":
        return [int(round_half_away(1000.0 * v / d)) for v, d in zip(real, dims)]
    if to_type == "norm_1":
        return [v / d for v, d in zip(real, dims)]
    return real


def format_bbox(bbox):
    """Serialize a box as `[x1,y1,x2,y2]`."""
    parts = []
    for value in bbox:
        if float(value).is_integer():
            parts.append(str(int(value)))
        else:
            parts.append(f"{value:.4f}".rstrip("0"))
    return "[" + ",".join(parts) + "]"


@dataclass
class TemplateSpec:

    """Rendering grammar and special tokens of a chat template."""

    system_begin: str = "<|im_start|>system\n"
    system_end: str = "<|im_end|>\n"
    user_begin: str = "<|im_start|>user\n"
    user_end: str = "<|im_end|>\n"
    assistant_begin: str = "<|im_start|>assistant\n"
    assistant_end: str = "<|im_end|>\n"
    tool_prompt_style: str = "react"
    bbox_output_type: str = "norm_1000"
    default_system: str = "You are a helpful assistant."
    bos: str = "<|begin|>"
    eos: str = "<|end|>"
    im_start: str = "<|im_start|>"
    im_end: str = "<|im_end|>"

    def validate(self):
        """Check the template, raising a `TemplateError` if it's invalid."""
        markers = [
            self.system_begin,
            self.system_end,
            self.user_begin,
            self.user_end,
            self.assistant_begin,
            self.assistant_end,
        ]
        if not all(markers):
            raise TemplateError("Template markers must be non-empty")
        begins = [self.system_begin, self.user_begin, self.assistant_begin]
        if len(set(begins)) != len(begins):
            raise TemplateError("Role begin markers must be distinct")
        names = [self.bos, self.eos, self.im_start, self.im_end, IMAGE_TOKEN]
        if not all(names) or len(set(names)) != len(names):
            raise TemplateError(
                f"Special token names must be non-empty and distinct: {names}"
            )
        if self.tool_prompt_style not in TOOL_PROMPT_STYLES:
            raise TemplateError(
                f"Unknown tool_prompt_style '{self.tool_prompt_style}', "
                f"use one of {TOOL_PROMPT_STYLES}"
            )
        if self.bbox_output_type not in BBOX_TYPES:
            raise TemplateError(f"Unknown bbox_output_type '{self.bbox_output_type}'")
        return self

    def specials(self):
        """Special token strings mapped to their ids (256 and up)."""
        names = [self.bos, self.eos, self.im_start, self.im_end, IMAGE_TOKEN]
        return {name: 256 + idx for idx, name in enumerate(names)}

    def tokenizer(self):
        """A `ByteTokenizer` knowing this template's special tokens."""
        return ByteTokenizer(self.specials())

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        fields = cls.__dataclass_fields__
        known = {k: v for k, v in (values or {}).items() if k in fields}
        return cls(**known).validate()


@dataclass
class Segment:

    """A piece of rendered text with its role and whether it's trained."""

    text: str
    role: str
    train: bool
    weight: float = 1.0


def _tool_function(tool):
    return tool.get("function", tool) if isinstance(tool, dict) else {"name": str(tool)}


def render_tools(tools, style):
    """The tool instruction block for the system prompt."""
    if style not in TOOL_PROMPT_STYLES:
        raise TemplateError(f"Unknown tool_prompt_style '{style}'")
    functions = [_tool_function(tool) for tool in tools]
    if style == "react":
        lines = []
        for func in functions:
            params = json.dumps(func.get("parameters", {}), ensure_ascii=False)
            name = func.get("name", "")
            description = func.get("description", "")
            lines.append(f"{name}: {description}, parameters: {params}")
        names = ",".join(func.get("name", "") for func in functions)
        return REACT_INSTRUCTION.format(tool_lines="\n".join(lines), tool_names=names)
    lines = [
        f"{idx}. {func.get('name', '')}: {json.dumps(func, ensure_ascii=False)}"
        for idx, func in enumerate(functions, start=1)
    ]
    return TOOLBENCH_INSTRUCTION.format(tool_lines="\n".join(lines))


def _substitute_objects(record, template, texts):
    """Replace `<ref-object>` / `<bbox>` placeholders in order of appearance.

    `texts` holds the history pairs (oldest first), then query and response.
    """
    n_objects = len(record.objects)
    for placeholder in ("<ref-object>", "<bbox>"):
        count = sum(text.count(placeholder) for text in texts)
        if count not in (0, n_objects) or (count and not n_objects):
            msg = (
                f"Found {count} {placeholder} placeholders for {n_objects} objects"
            )
            log.error(msg)
            raise TemplateError(msg)
    if n_objects and not any("<ref-object>" in t or "<bbox>" in t for t in texts):
        raise TemplateError(f"Record has {n_objects} objects but no placeholders")

    counters = {"<ref-object>": 0, "<bbox>": 0}

    def fill(match):
        placeholder = match.group(0)
        obj = record.objects[counters[placeholder]]
        counters[placeholder] += 1
        if placeholder == "<ref-object>":
            return obj.caption
        size = None
        if obj.image < len(record.image_sizes):
            size = record.image_sizes[obj.image]
        converted = convert_bbox(
            obj.bbox, obj.bbox_type, template.bbox_output_type, size
        )
        return format_bbox(converted)

    return [re.sub(r"<ref-object>|<bbox>", fill, text) for text in texts]


def _split_observations(text):
    """Split assistant text into (text, is_observation) parts.

    The content following an `Observation:` marker up to the end of its line
    is tool output.
    """
    parts = []
    pos = 0
    for match in _OBSERVATION_RE.finditer(text):
        line_end = text.find("\n", match.end())
        line_end = len(text) if line_end < 0 else line_end + 1
        parts.append((text[pos : match.end()], False))
        parts.append((text[match.end() : line_end], True))
        pos = line_end
    parts.append((text[pos:], False))
    return [(chunk, obs) for chunk, obs in parts if chunk]


def render(record, template, include_response=True, train_history=True):
    """Render a record into ordered, annotated segments.

    The order is system (with tools), history pairs, query, response. Each
    user segment also carries the opening assistant marker, so every
    assistant segment starts right at the answer text and ends with the
    closing marker. Tool output after `Observation:` inside assistant text
    becomes an untrained `tool-observation` segment.

    Parameters
    ----------
    record : StandardRecord
    template : TemplateSpec
    include_response : bool, optional
        If False the rendering stops after the final user turn (a prompt for
        generation), by default True.
    train_history : bool, optional
        Whether assistant turns from the history are trained, by default True.

    Returns
    -------
    list(Segment)

    Raises
    ------
    TemplateError
        Raised for placeholder / object count mismatches or an unknown tool
        prompt style.
    """
    template.validate()
    texts = [text for pair in record.history for text in pair]
    texts += [record.query, record.response]
    texts = _substitute_objects(record, template, texts)
    query, response = texts[-2], texts[-1]
    history = [(texts[i], texts[i + 1]) for i in range(0, len(texts) - 2, 2)]

    segments = []
    system = record.system if record.system is not None else template.default_system
    if record.tools:
        tools_block = render_tools(record.tools, template.tool_prompt_style)
        system = f"{system}\n\n{tools_block}" if system else tools_block
    if system:
        segments.append(
            Segment(
                f"{template.system_begin}{system}{template.system_end}",
                "system",
                False,
            )
        )

    weight = 1.0 if record.response_weight is None else float(record.response_weight)

    def assistant(text, trained):
        for chunk, is_obs in _split_observations(text):
            if is_obs:
                segments.append(Segment(chunk, "tool-observation", False))
            else:
                segments.append(Segment(chunk, "assistant", trained, weight))
        segments.append(Segment(template.assistant_end, "assistant", trained, weight))

    def user(text):
        segments.append(
            Segment(
                f"{template.user_begin}{text}{template.user_end}"
                f"{template.assistant_begin}",
                "user",
                False,
            )
        )

    for past_query, past_response in history:
        user(past_query)
        assistant(past_response, train_history)
    user(query)
    if include_response:
        assistant(response, True)
    return _coalesce(segments)


def _coalesce(segments):
    """Join neighbouring segments with identical annotations."""
    merged = []
    for seg in segments:
        if (
            merged
            and merged[-1].role == seg.role
            and merged[-1].train == seg.train
            and merged[-1].weight == seg.weight
        ):
            merged[-1] = replace(merged[-1], text=merged[-1].text + seg.text)
        else:
            merged.append(seg)
    return merged


def rendered_text(segments):
    """The full text of rendered segments."""
    return "".join(seg.text for seg in segments)


class ByteTokenizer:

    """Byte-level tokenizer with atomic special tokens.

    Every byte of the UTF-8 encoding is one token (id = byte value), special
    token strings are matched first and map to their single ids.
    """

    def __init__(self, specials=None):
        if specials is None:
            specials = TemplateSpec().specials()
        self.specials = dict(specials)
        self.id_to_special = {v: k for k, v in self.specials.items()}
        ordered = sorted(self.specials, key=len, reverse=True)
        self._pattern = None
        if ordered:
            self._pattern = re.compile("|".join(re.escape(s) for s in ordered))

    def __str__(self):
        return (
            f"ByteTokenizer(vocab_size={self.vocab_size}, "
            f"specials={list(self.specials)})"
        )

    @property
    def vocab_size(self):
        """Number of ids, bytes plus special tokens."""
        return 256 + len(self.specials)

    def token_id(self, name):
        """Id of a special token string."""
        return self.specials[name]

    def encode_with_offsets(self, text):
        """Token ids and their `(start, end)` byte offsets in the UTF-8 text."""
        ids = []
        offsets = []
        pos = 0
        last = 0
        pieces = []
        if self._pattern is not None:
            for match in self._pattern.finditer(text):
                pieces.append((text[last : match.start()], None))
                pieces.append((match.group(0), self.specials[match.group(0)]))
                last = match.end()
        pieces.append((text[last:], None))
        for piece, special in pieces:
            raw = piece.encode("utf-8")
            if special is not None:
                ids.append(special)
                offsets.append((pos, pos + len(raw)))
            else:
                for idx, byte in enumerate(raw):
                    ids.append(byte)
                    offsets.append((pos + idx, pos + idx + 1))
            pos += len(raw)
        return ids, offsets

    def encode(self, text):
        """Token ids of a text."""
        return self.encode_with_offsets(text)[0]

    def token_bytes(self, token_id):
        """The bytes a single token stands for."""
        if token_id < 256:
            return bytes([token_id])
        try:
            return self.id_to_special[token_id].encode("utf-8")
        except KeyError as err:
            raise TemplateError(f"Unknown token id {token_id}") from err

    def decode_bytes(self, ids):
        """The raw bytes of a token sequence."""
        return b"".join(self.token_bytes(int(i)) for i in ids)

    def decode(self, ids, errors="strict"):
        """The text of a token sequence."""
        return self.decode_bytes(ids).decode("utf-8", errors=errors)


def tokenize_with_offsets(text, specials=None):
    """Tokenize a text, returning token ids and byte offset ranges.

    Parameters
    ----------
    text : str
    specials : dict, optional
        Special token strings to ids, by default the standard template's.

    Returns
    -------
    (list(int), list(tuple(int, int)))
    """
    return ByteTokenizer(specials).encode_with_offsets(text)


def segment_spans(segments):
    """`(start, end, role, train)` byte ranges of segments in the joined text."""
    spans = []
    pos = 0
    for seg in segments:
        size = len(seg.text.encode("utf-8"))
        spans.append((pos, pos + size, seg.role, seg.train))
        pos += size
    return spans


def loss_scale_map(segments):
    """Byte ranges of trained segments with their loss weights.

    Every trained segment gets its base weight (1.0 or the record's
    `response_weight`). On top of that, the line content after an agent field
    marker (`Action:`, `Action Input:`, `Name:`, `Tool:`, `Arguments:`,
    `Command`) gets 3.0 and the `Observation:` marker itself 2.0. Consumers
    resolve overlaps by taking the maximum.

    Parameters
    ----------
    segments : list(Segment)

    Returns
    -------
    list(tuple(tuple(int, int), float))
        `((start, end), weight)` over the UTF-8 bytes of the joined text.
    """
    ranges = []
    for (start, end, _, train), seg in zip(segment_spans(segments), segments):
        if not train:
            continue
        ranges.append(((start, end), seg.weight))
        text = seg.text

        def to_bytes(char_pos, text=text, start=start):
            return start + len(text[:char_pos].encode("utf-8"))

        for match in _FIELD_RE.finditer(text):
            weight = dict(FIELD_WEIGHTS)[match.group(1)]
            if match.end(2) > match.start(2):
                span = (to_bytes(match.start(2)), to_bytes(match.end(2)))
                ranges.append((span, weight))
        for match in _OBSERVATION_RE.finditer(text):
            marker_start = match.end() - len(OBSERVATION_MARKER)
            ranges.append(
                ((to_bytes(marker_start), to_bytes(match.end())), OBSERVATION_WEIGHT)
            )
    return ranges


@dataclass
class EncodedSample:

    """Token ids with per-position training targets.

    `labels[i]` is `input_ids[i]` where that token is trained and
    `IGNORE_INDEX` elsewhere, `loss_weights[i]` is 0 exactly at ignored
    positions. Consumers predict position `i + 1` from position `i`.
    """

    input_ids: np.ndarray
    labels: np.ndarray
    loss_weights: np.ndarray
    spans: list = field(default_factory=list)

    def __len__(self):
        return len(self.input_ids)

    @property
    def n_trained(self):
        """Number of trained positions."""
        return int(np.count_nonzero(self.labels != IGNORE_INDEX))

    def to_dict(self):
        return {
            "input_ids": self.input_ids.tolist(),
            "labels": self.labels.tolist(),
            "loss_weights": self.loss_weights.tolist(),
        }


def _weights_from_ranges(n_bytes, ranges):
    weights = np.zeros(n_bytes)
    for (start, end), weight in ranges:
        weights[start:end] = np.maximum(weights[start:end], weight)
    return weights


def encode(
    record,
    template,
    max_length=2048,
    loss_scale_enabled=True,
    tokenizer=None,
    train_history=True,
):  # pylint: disable-msg=too-many-arguments,too-many-locals
    """Render and tokenize a record into an `EncodedSample`.

    Parameters
    ----------
    record : StandardRecord
    template : TemplateSpec
    max_length : int, optional
        Maximum number of tokens, by default 2048. Longer samples lose their
        oldest history pairs first.
    loss_scale_enabled : bool, optional
        Apply agent field weights and `response_weight`; if False every trained
        token gets 1.0. By default True.
    tokenizer : ByteTokenizer, optional
        By default the template's tokenizer.
    train_history : bool, optional
        Train on the assistant turns of the history too, by default True.

    Returns
    -------
    EncodedSample

    Raises
    ------
    SampleTooLongError
        Raised if the sample is too long even without any history.
    """
    tokenizer = tokenizer or template.tokenizer()
    work = record
    while True:
        segments = render(work, template, train_history=train_history)
        text = rendered_text(segments)
        ids, offsets = tokenizer.encode_with_offsets(text)
        if len(ids) <= max_length:
            break
        if not work.history:
            msg = (
                f"sample too long after history truncation: {len(ids)} tokens "
                f"exceed max_length {max_length}"
            )
            log.error(msg)
            raise SampleTooLongError(msg)
        log.debug(
            "Dropping the oldest history pair, {} > {} tokens", len(ids), max_length
        )
        work = replace(work, history=work.history[1:])

    n_bytes = len(text.encode("utf-8"))
    if loss_scale_enabled:
        ranges = loss_scale_map(segments)
    else:
        ranges = [((s, e), 1.0) for s, e, _, train in segment_spans(segments) if train]
    byte_weights = _weights_from_ranges(n_bytes, ranges)

    weights = np.array([byte_weights[start] for start, _ in offsets], dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    labels = np.where(weights > 0, ids, IGNORE_INDEX).astype(np.int64)
    return EncodedSample(ids, labels, weights, segment_spans(segments))


def encode_prompt(record, template, tokenizer=None):
    """Token ids of the prompt part of a record, ready for generation."""
    tokenizer = tokenizer or template.tokenizer()
    segments = render(record, template, include_response=False)
    return tokenizer.encode(rendered_text(segments))


def encode_pretrain(record, template, max_length=2048, tokenizer=None):
    """Encode a pre-training record: plain text between bos and eos, all trained.

    The text is the response (or the query if there is no response), too long
    texts are truncated.
    """
    tokenizer = tokenizer or template.tokenizer()
    text = record.response or record.query
    if not text:
        raise DatasetError("Pre-training record without text")
    ids = [tokenizer.token_id(template.bos)] + tokenizer.encode(text)
    ids.append(tokenizer.token_id(template.eos))
    if len(ids) > max_length:
        log.debug(
            "Truncating pre-training text from {} to {} tokens", len(ids), max_length
        )
        ids = ids[:max_length]
    ids = np.asarray(ids, dtype=np.int64)
    labels = ids.copy()
    labels[0] = IGNORE_INDEX
    weights = (labels != IGNORE_INDEX).astype(np.float64)
    span = (0, len(text.encode("utf-8")), "text", True)
    return EncodedSample(ids, labels, weights, [span])


def with_response(record, response):
    """A copy of a record with another response (e.g. the rejected one)."""
    return replace(record, response=response, rejected_response=None)


def dump_encoded(samples, path):
    """Write encoded samples as JSONL (ids, labels and weights per line)."""
    return write_jsonl(path, (sample.to_dict() for sample in samples))
