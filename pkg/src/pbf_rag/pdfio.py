"""Minimal PDF reading: per-page text extraction plus a rasterized preview.

Deliberately narrow in scope, with no third-party PDF dependency:

- objects are located by scanning for ``N G obj`` markers rather than by
  parsing cross-reference tables, so damaged or exotic xref data does not
  block ingestion; object streams are expanded when present
- only FlateDecode (and raw) content streams are decoded; anything else
  counts as a text-extraction failure for that page, which yields empty
  text rather than an error
- string data is decoded as Latin-1, which covers the standard simple fonts
- the page preview paints extracted text onto a white canvas; it is a
  legibility aid for downstream vision models, not a faithful rasterization

Encrypted documents are rejected outright.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from pathlib import Path

from PIL import Image, ImageDraw, ImageFont

from .errors import EncryptedPdfError, PdfReadError

_WHITESPACE = b"\x00\t\n\x0c\r "
_DELIMITERS = b"()<>[]{}/%"
_EOL = b"\r\n"

_LETTER = (612.0, 792.0)
_MAX_TREE_DEPTH = 64


class _Name(str):
    """A PDF name object; the leading slash is stripped."""


class _Op(str):
    """A bare keyword token in a content stream."""


@dataclass(frozen=True)
class _Ref:
    num: int
    gen: int


def _a85decode(data: bytes) -> bytes | None:
    import base64

    text = data.strip()
    if text.endswith(b"~>"):
        text = text[:-2]
    try:
        return base64.a85decode(text, ignorechars=b" \t\n\r\x0b\x0c")
    except ValueError:
        return None


class _Stream:
    def __init__(self, meta: dict, raw: bytes):
        self.meta = meta
        self.raw = raw

    def decoded(self) -> bytes | None:
        filters = self.meta.get("Filter")
        if filters is None:
            return self.raw
        if isinstance(filters, _Name):
            filters = [filters]
        if not isinstance(filters, list):
            return None
        data = self.raw
        for filt in filters:
            if filt == "FlateDecode":
                try:
                    data = zlib.decompress(data)
                except zlib.error:
                    return None
            elif filt == "ASCII85Decode":
                decoded = _a85decode(data)
                if decoded is None:
                    return None
                data = decoded
            else:
                return None
        return data


class _Lexer:
    """Token reader shared by the object parser and content-stream scanner."""

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def eof(self) -> bool:
        return self.pos >= len(self.data)

    def skip_ws(self) -> None:
        data = self.data
        while self.pos < len(data):
            b = data[self.pos]
            if b in _WHITESPACE:
                self.pos += 1
            elif b == 0x25:  # '%' comment runs to end of line
                while self.pos < len(data) and data[self.pos] not in _EOL:
                    self.pos += 1
            else:
                return

    def _read_keyword(self) -> str:
        start = self.pos
        data = self.data
        while self.pos < len(data) and data[self.pos] not in _WHITESPACE and data[self.pos] not in _DELIMITERS:
            self.pos += 1
        return data[start:self.pos].decode("latin-1")

    def _read_name(self) -> _Name:
        self.pos += 1  # consume '/'
        raw = self._read_keyword()
        # '#hh' escapes inside names
        def unescape(m: re.Match) -> str:
            return chr(int(m.group(1), 16))
        return _Name(re.sub(r"#([0-9A-Fa-f]{2})", unescape, raw))

    def _read_literal_string(self) -> bytes:
        data = self.data
        self.pos += 1  # consume '('
        out = bytearray()
        depth = 1
        while self.pos < len(data):
            b = data[self.pos]
            self.pos += 1
            if b == 0x5C:  # backslash escape
                if self.pos >= len(data):
                    break
                e = data[self.pos]
                self.pos += 1
                if e in b"nrtbf":
                    out.append({0x6E: 10, 0x72: 13, 0x74: 9, 0x62: 8, 0x66: 12}[e])
                elif e in b"()\\":
                    out.append(e)
                elif 0x30 <= e <= 0x37:  # up to three octal digits
                    digits = [e]
                    while len(digits) < 3 and self.pos < len(data) and 0x30 <= data[self.pos] <= 0x37:
                        digits.append(data[self.pos])
                        self.pos += 1
                    out.append(int(bytes(digits), 8) & 0xFF)
                elif e in _EOL:  # line continuation
                    if e == 0x0D and self.pos < len(data) and data[self.pos] == 0x0A:
                        self.pos += 1
                else:
                    out.append(e)
            elif b == 0x28:  # '('
                depth += 1
                out.append(b)
            elif b == 0x29:  # ')'
                depth -= 1
                if depth == 0:
                    return bytes(out)
                out.append(b)
            else:
                out.append(b)
        raise PdfReadError("unterminated literal string")

    def _read_hex_string(self) -> bytes:
        data = self.data
        self.pos += 1  # consume '<'
        digits = []
        while self.pos < len(data):
            b = data[self.pos]
            self.pos += 1
            if b == 0x3E:  # '>'
                if len(digits) % 2:
                    digits.append(0x30)
                return bytes(
                    int(chr(digits[i]) + chr(digits[i + 1]), 16) for i in range(0, len(digits), 2)
                )
            if chr(b) in "0123456789abcdefABCDEF":
                digits.append(b)
        raise PdfReadError("unterminated hex string")

    def _read_number(self) -> int | float:
        start = self.pos
        data = self.data
        if data[self.pos : self.pos + 1] in (b"+", b"-"):
            self.pos += 1
        seen_dot = False
        while self.pos < len(data) and (chr(data[self.pos]).isdigit() or data[self.pos] == 0x2E):
            if data[self.pos] == 0x2E:
                if seen_dot:
                    break
                seen_dot = True
            self.pos += 1
        token = data[start:self.pos].decode("latin-1")
        if token in ("+", "-", "", "."):
            raise PdfReadError(f"malformed number at offset {start}")
        return float(token) if seen_dot else int(token)

    def next_token(self, content_mode: bool = False):
        """Return the next object, or an _Op keyword; None at end of input."""
        self.skip_ws()
        if self.eof():
            return None
        data = self.data
        b = data[self.pos]
        if b == 0x2F:  # '/'
            return self._read_name()
        if b == 0x28:  # '('
            return self._read_literal_string()
        if b == 0x3C:  # '<' or '<<'
            if data[self.pos : self.pos + 2] == b"<<":
                return self._read_dict(content_mode)
            return self._read_hex_string()
        if b == 0x5B:  # '['
            return self._read_array(content_mode)
        if b in b"+-." or chr(b).isdigit():
            num = self._read_number()
            if not content_mode and isinstance(num, int) and num >= 0:
                return self._maybe_ref(num)
            return num
        if b in _DELIMITERS:
            raise PdfReadError(f"unexpected delimiter {chr(b)!r} at offset {self.pos}")
        keyword = self._read_keyword()
        if not keyword:
            raise PdfReadError(f"stuck at offset {self.pos}")
        if keyword == "true":
            return True
        if keyword == "false":
            return False
        if keyword == "null":
            return None if not content_mode else _Op("null")
        return _Op(keyword)

    def _maybe_ref(self, num: int):
        # Lookahead for 'gen R'; rewind if it is not a reference.
        saved = self.pos
        self.skip_ws()
        start2 = self.pos
        data = self.data
        if start2 < len(data) and chr(data[start2]).isdigit():
            try:
                gen = self._read_number()
            except PdfReadError:
                self.pos = saved
                return num
            if isinstance(gen, int):
                self.skip_ws()
                if data[self.pos : self.pos + 1] == b"R" and (
                    self.pos + 1 >= len(data)
                    or data[self.pos + 1] in _WHITESPACE
                    or data[self.pos + 1] in _DELIMITERS
                ):
                    self.pos += 1
                    return _Ref(num, gen)
        self.pos = saved
        return num

    def _read_array(self, content_mode: bool) -> list:
        self.pos += 1  # consume '['
        items = []
        while True:
            self.skip_ws()
            if self.eof():
                raise PdfReadError("unterminated array")
            if self.data[self.pos] == 0x5D:  # ']'
                self.pos += 1
                return items
            items.append(self.next_token(content_mode))

    def _read_dict(self, content_mode: bool) -> dict:
        self.pos += 2  # consume '<<'
        out: dict = {}
        while True:
            self.skip_ws()
            if self.eof():
                raise PdfReadError("unterminated dictionary")
            if self.data[self.pos : self.pos + 2] == b">>":
                self.pos += 2
                return out
            key = self.next_token(content_mode)
            if not isinstance(key, _Name):
                raise PdfReadError("dictionary key is not a name")
            out[str(key)] = self.next_token(content_mode)

    def parse_object(self):
        """Parse one complete object (no keywords allowed at top level)."""
        token = self.next_token()
        if isinstance(token, _Op):
            raise PdfReadError(f"unexpected keyword {token!r}")
        return token


_OBJ_RE = re.compile(rb"(?<![0-9])(\d{1,10})\s+(\d{1,5})\s+obj\b")


def _read_stream_data(data: bytes, lex: _Lexer, meta: dict) -> bytes:
    lex.pos += len(b"stream")
    if data[lex.pos : lex.pos + 2] == b"\r\n":
        lex.pos += 2
    elif data[lex.pos : lex.pos + 1] == b"\n":
        lex.pos += 1
    start = lex.pos
    length = meta.get("Length")
    if isinstance(length, int) and length >= 0:
        end = start + length
        tail = data[end : end + 32].lstrip(bytes(_WHITESPACE))
        if tail.startswith(b"endstream"):
            lex.pos = end
            return data[start:end]
    # Length missing, indirect, or wrong: fall back to scanning.
    idx = data.find(b"endstream", start)
    if idx < 0:
        raise PdfReadError("unterminated stream")
    end = idx
    if data[end - 2 : end] == b"\r\n":
        end -= 2
    elif data[end - 1 : end] in (b"\r", b"\n"):
        end -= 1
    lex.pos = idx
    return data[start:end]


def _scan_objects(data: bytes) -> dict[int, object]:
    """Collect indirect objects by brute-force scan; later definitions win."""
    objects: dict[int, object] = {}
    for match in _OBJ_RE.finditer(data):
        lex = _Lexer(data, match.end())
        try:
            value = lex.parse_object()
            lex.skip_ws()
            if isinstance(value, dict) and data.startswith(b"stream", lex.pos):
                raw = _read_stream_data(data, lex, value)
                value = _Stream(value, raw)
        except PdfReadError:
            continue
        objects[int(match.group(1))] = value
    return objects


def _expand_object_streams(objects: dict[int, object]) -> None:
    for obj in list(objects.values()):
        if not (isinstance(obj, _Stream) and obj.meta.get("Type") == "ObjStm"):
            continue
        payload = obj.decoded()
        count = obj.meta.get("N")
        first = obj.meta.get("First")
        if payload is None or not isinstance(count, int) or not isinstance(first, int):
            continue
        header = _Lexer(payload[:first])
        pairs = []
        try:
            for _ in range(count):
                num = header.next_token(content_mode=True)
                off = header.next_token(content_mode=True)
                if not isinstance(num, int) or not isinstance(off, int):
                    raise PdfReadError("bad object stream header")
                pairs.append((num, off))
            for num, off in pairs:
                inner = _Lexer(payload, first + off)
                objects.setdefault(num, inner.parse_object())
        except PdfReadError:
            continue


def _resolve(value, objects: dict[int, object], depth: int = 0):
    while isinstance(value, _Ref):
        if depth > 32:
            raise PdfReadError("reference chain too deep")
        value = objects.get(value.num)
        depth += 1
    return value


def _detect_encryption(data: bytes, objects: dict[int, object]) -> None:
    for match in re.finditer(rb"trailer", data):
        lex = _Lexer(data, match.end())
        try:
            trailer = lex.parse_object()
        except PdfReadError:
            continue
        if isinstance(trailer, dict) and "Encrypt" in trailer:
            raise EncryptedPdfError("encrypted PDFs are not supported")
    for obj in objects.values():
        meta = obj.meta if isinstance(obj, _Stream) else obj
        if isinstance(meta, dict) and meta.get("Type") == "XRef" and "Encrypt" in meta:
            raise EncryptedPdfError("encrypted PDFs are not supported")


def _collect_pages(objects: dict[int, object]) -> list[dict]:
    catalog = None
    for obj in objects.values():
        meta = obj.meta if isinstance(obj, _Stream) else obj
        if isinstance(meta, dict) and meta.get("Type") == "Catalog":
            catalog = meta
    pages: list[dict] = []

    def walk(node_ref, inherited_media, depth: int) -> None:
        if depth > _MAX_TREE_DEPTH:
            raise PdfReadError("page tree too deep")
        node = _resolve(node_ref, objects)
        if isinstance(node, _Stream):
            node = node.meta
        if not isinstance(node, dict):
            return
        media = node.get("MediaBox", inherited_media)
        node_type = node.get("Type")
        if node_type == "Page":
            page = dict(node)
            page["MediaBox"] = media
            pages.append(page)
        elif node_type == "Pages":
            kids = _resolve(node.get("Kids"), objects)
            if isinstance(kids, list):
                for kid in kids:
                    walk(kid, media, depth + 1)

    if catalog is not None:
        walk(catalog.get("Pages"), None, 0)
    if not pages:
        # Fallback for documents whose catalog could not be located.
        for num in sorted(objects):
            obj = objects[num]
            if isinstance(obj, dict) and obj.get("Type") == "Page":
                pages.append(dict(obj))
    return pages


def _media_size(page: dict, objects: dict[int, object]) -> tuple[float, float]:
    box = _resolve(page.get("MediaBox"), objects)
    if isinstance(box, list) and len(box) == 4:
        try:
            coords = [float(_resolve(v, objects)) for v in box]
            width = abs(coords[2] - coords[0])
            height = abs(coords[3] - coords[1])
            if width > 0 and height > 0:
                return width, height
        except (TypeError, ValueError, PdfReadError):
            pass
    return _LETTER


def _page_content(page: dict, objects: dict[int, object]) -> bytes | None:
    contents = _resolve(page.get("Contents"), objects)
    if contents is None:
        return b""
    streams = contents if isinstance(contents, list) else [contents]
    parts = []
    for item in streams:
        item = _resolve(item, objects)
        if isinstance(item, _Stream):
            decoded = item.decoded()
            if decoded is not None:
                parts.append(decoded)
    if not parts:
        return None
    return b"\n".join(parts)


_ESCAPES = {0x6E: 10, 0x72: 13, 0x74: 9, 0x62: 8, 0x66: 12}
_KERN_SPACE_THRESHOLD = -180  # TJ shifts beyond this read as a word gap


def _extract_text(content: bytes) -> str:
    """Pull show-text operator arguments out of a decoded content stream."""
    lex = _Lexer(content)
    lines: list[str] = []
    buf: list[str] = []
    operands: list = []

    def flush() -> None:
        if buf:
            line = "".join(buf).rstrip()
            buf.clear()
            if line:
                lines.append(line)

    def show(raw: bytes) -> None:
        buf.append(raw.decode("latin-1"))

    while True:
        try:
            token = lex.next_token(content_mode=True)
        except PdfReadError:
            break
        if token is None:
            break
        if not isinstance(token, _Op):
            operands.append(token)
            continue
        op = str(token)
        if op == "Tj":
            if operands and isinstance(operands[-1], bytes):
                show(operands[-1])
        elif op == "'":
            flush()
            if operands and isinstance(operands[-1], bytes):
                show(operands[-1])
        elif op == '"':
            flush()
            if operands and isinstance(operands[-1], bytes):
                show(operands[-1])
        elif op == "TJ":
            if operands and isinstance(operands[-1], list):
                for item in operands[-1]:
                    if isinstance(item, bytes):
                        show(item)
                    elif isinstance(item, (int, float)) and item <= _KERN_SPACE_THRESHOLD:
                        buf.append(" ")
        elif op in ("Td", "TD", "T*", "Tm", "ET"):
            flush()
        elif op == "BI":
            # Inline image: skip to its terminator.
            idx = content.find(b"EI", lex.pos)
            if idx < 0:
                break
            lex.pos = idx + 2
        operands.clear()
    flush()
    return "\n".join(lines)


@dataclass(frozen=True)
class PdfPage:
    """Extracted content of one page; text may be empty."""

    number: int
    width: float
    height: float
    text: str


def read_pdf(path: str | Path) -> list[PdfPage]:
    """Read a PDF into per-page text records.

    Raises PdfReadError for unreadable or page-less input and
    EncryptedPdfError for encrypted documents. A page whose content cannot
    be decoded yields empty text, never an error.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise PdfReadError(f"cannot read {path}: {exc}") from exc
    if b"%PDF" not in data[:1024]:
        raise PdfReadError(f"{path} is not a PDF (missing header)")
    objects = _scan_objects(data)
    if not objects:
        raise PdfReadError(f"{path} contains no readable PDF objects")
    _detect_encryption(data, objects)
    _expand_object_streams(objects)
    page_nodes = _collect_pages(objects)
    if not page_nodes:
        raise PdfReadError(f"{path} has no pages")
    pages = []
    for number, node in enumerate(page_nodes, start=1):
        width, height = _media_size(node, objects)
        try:
            content = _page_content(node, objects)
            text = _extract_text(content) if content is not None else ""
        except PdfReadError:
            text = ""
        pages.append(PdfPage(number=number, width=width, height=height, text=text))
    return pages


def _load_font(size: int) -> ImageFont.ImageFont:
    try:
        return ImageFont.load_default(size=size)
    except TypeError:  # older Pillow without sizable default font
        return ImageFont.load_default()


def _wrap(draw: ImageDraw.ImageDraw, line: str, font, max_width: int) -> list[str]:
    if not line:
        return [""]
    words = line.split(" ")
    out: list[str] = []
    current = ""
    for word in words:
        candidate = f"{current} {word}" if current else word
        if draw.textlength(candidate, font=font) <= max_width or not current:
            current = candidate
        else:
            out.append(current)
            current = word
    out.append(current)
    return out


def render_page_preview(page: PdfPage, dpi: int = 144) -> Image.Image:
    """Paint the page's extracted text onto a white canvas at the given dpi."""
    scale = dpi / 72.0
    size = (max(1, round(page.width * scale)), max(1, round(page.height * scale)))
    image = Image.new("RGB", size, "white")
    draw = ImageDraw.Draw(image)
    font_size = max(8, round(10 * scale))
    font = _load_font(font_size)
    margin = round(54 * scale)
    line_height = round(font_size * 1.35)
    max_width = max(16, size[0] - 2 * margin)
    y = margin
    for raw_line in page.text.splitlines():
        for segment in _wrap(draw, raw_line, font, max_width):
            if y + line_height > size[1] - margin:
                return image
            if segment:
                draw.text((margin, y), segment, fill="black", font=font)
            y += line_height
    return image
