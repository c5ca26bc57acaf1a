"""Streaming MediaWiki dump ingestion.

Covers the three inputs the corpus pipeline needs: pages-articles XML
(streamed page by page with bounded memory), <math> tag extraction with
page provenance, and the MediaWiki SQL dump tables (categorylinks, page,
category) used to build a depth-bounded category tree.

Compression is the caller's problem: pipe bunzip2/zstd output in.
"""

from __future__ import annotations

import html
import io
import re
import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import dataclass, field

NS_MAIN = 0
NS_CATEGORY = 14


class WikiError(Exception):
    pass


class MalformedXml(WikiError):
    def __init__(self, message, offset=None):
        super().__init__(f"{message}" + (f" (byte {offset})" if offset is not None else ""))
        self.offset = offset


class TruncatedDump(WikiError):
    pass


class SqlSyntax(WikiError):
    def __init__(self, message, offset=None):
        super().__init__(f"{message}" + (f" (offset {offset})" if offset is not None else ""))
        self.offset = offset


class RootNotFound(WikiError):
    pass


@dataclass(frozen=True)
class RawExpression:
    page_id: int
    page_title: str
    latex: str
    byte_offset: int


@dataclass
class PageRecord:
    page_id: int
    title: str
    namespace: int
    text: str


@dataclass(frozen=True)
class CategoryLink:
    from_page_id: int
    to_category_name: str
    link_type: str  # page | subcat | file


def _localname(tag):
    return tag.rsplit("}", 1)[-1]


def stream_pages(source):
    """Yield PageRecords from a pages-articles XML stream, one page in memory
    at a time.

    Accepts a binary file object or a path.  Truncated input raises
    TruncatedDump after yielding all complete pages; other XML problems
    raise MalformedXml with a byte offset.
    """
    close = False
    if isinstance(source, (str, bytes)):
        source = open(source, "rb")
        close = True
    elif isinstance(source, (bytearray,)):
        source = io.BytesIO(bytes(source))
    try:
        context = ET.iterparse(source, events=("end",))
        while True:
            try:
                event, elem = next(context)
            except StopIteration:
                break
            except ET.ParseError as e:
                if "no element found" in str(e):
                    raise TruncatedDump(f"dump truncated: {e}") from e
                offset = getattr(e, "position", (None, None))
                raise MalformedXml(str(e), offset=offset[1]) from e
            if _localname(elem.tag) != "page":
                continue
            page_id, title, ns, text = None, "", 0, ""
            for child in elem:
                name = _localname(child.tag)
                if name == "id" and page_id is None:
                    page_id = int(child.text or 0)
                elif name == "title":
                    title = child.text or ""
                elif name == "ns":
                    ns = int(child.text or 0)
                elif name == "revision":
                    for sub in child:
                        if _localname(sub.tag) == "text":
                            text = sub.text or ""
            yield PageRecord(page_id=page_id or 0, title=title, namespace=ns,
                             text=text)
            elem.clear()
    finally:
        if close:
            source.close()


_MATH_OPEN_RE = re.compile(r"<math(\s[^>]*)?(/)?>", re.IGNORECASE)
_MATH_CLOSE = re.compile(r"</math\s*>", re.IGNORECASE)


def extract_math(page, tally=None):
    """All <math>...</math> bodies in a page, entity-decoded, with offsets.

    Self-closing/empty tags are skipped; an unterminated tag is skipped and
    counted in the optional diagnostics tally dict under 'unterminated'.
    """
    out = []
    text = page.text
    pos = 0
    while True:
        m = _MATH_OPEN_RE.search(text, pos)
        if m is None:
            break
        if m.group(2):  # self-closing
            pos = m.end()
            continue
        close = _MATH_CLOSE.search(text, m.end())
        if close is None:
            if tally is not None:
                tally["unterminated"] = tally.get("unterminated", 0) + 1
            pos = m.end()
            continue
        body = html.unescape(text[m.end():close.start()]).strip()
        if body:
            out.append(RawExpression(page_id=page.page_id,
                                     page_title=page.title,
                                     latex=body,
                                     byte_offset=m.start()))
        pos = close.end()
    return out


# --- MediaWiki SQL dump parsing -------------------------------------------

_TABLE_COLUMNS = {"categorylinks": 7, "category": 5, "page": None}


def iter_insert_tuples(source, table):
    """Yield raw value tuples from INSERT INTO `table` VALUES (...),(...);
    statements, handling quoted strings with escapes and NULL.

    Dumps put one INSERT statement per line; memory stays bounded by the
    longest statement, not the file.
    """
    close = False
    if isinstance(source, bytes):
        source = source.decode("utf-8", errors="replace")
    if isinstance(source, str):
        if "INSERT" in source or "\n" in source:
            source = io.StringIO(source)
        else:
            source = open(source, "r", encoding="utf-8", errors="replace")
            close = True
    try:
        marker = f"INSERT INTO `{table}` VALUES "
        for line in source:
            pos = 0
            while True:
                start = line.find(marker, pos)
                if start < 0:
                    break
                pos = start + len(marker)
                pos = yield from _parse_values(line, pos)
    finally:
        if close:
            source.close()


def _parse_values(buf, pos):
    n = len(buf)
    while pos < n:
        while pos < n and buf[pos] in " ,\n":
            pos += 1
        if pos < n and buf[pos] == ";":
            return pos + 1
        if pos >= n or buf[pos] != "(":
            raise SqlSyntax("expected '(' in VALUES list", pos)
        pos += 1
        row, cell = [], []
        while True:
            if pos >= n:
                raise SqlSyntax("unterminated VALUES tuple", pos)
            ch = buf[pos]
            if ch == "'":
                pos += 1
                out = []
                while True:
                    if pos >= n:
                        raise SqlSyntax("unterminated string literal", pos)
                    c = buf[pos]
                    if c == "\\" and pos + 1 < n:
                        esc = buf[pos + 1]
                        out.append({"n": "\n", "t": "\t", "r": "\r",
                                    "0": "\0"}.get(esc, esc))
                        pos += 2
                    elif c == "'":
                        if pos + 1 < n and buf[pos + 1] == "'":
                            out.append("'")
                            pos += 2
                        else:
                            pos += 1
                            break
                    else:
                        out.append(c)
                        pos += 1
                row.append("".join(out))
                cell = None
            elif ch == "," :
                if cell is not None:
                    row.append(_sql_scalar("".join(cell)))
                cell = []
                pos += 1
            elif ch == ")":
                if cell is not None:
                    row.append(_sql_scalar("".join(cell)))
                pos += 1
                break
            else:
                if cell is None:
                    raise SqlSyntax("unexpected character after string", pos)
                cell.append(ch)
                pos += 1
        yield tuple(row)
    return pos


def _sql_scalar(text):
    text = text.strip()
    if text.upper() == "NULL":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def serialize_rows(rows, table):
    """Re-serialize parsed tuples as a single INSERT statement (round-trip aid)."""
    def cell(v):
        if v is None:
            return "NULL"
        if isinstance(v, (int, float)):
            return repr(v)
        return "'" + str(v).replace("\\", "\\\\").replace("'", "\\'") + "'"

    values = ",".join("(" + ",".join(cell(v) for v in row) + ")" for row in rows)
    return f"INSERT INTO `{table}` VALUES {values};"


def parse_sql_dump(source, table):
    """Yield typed rows for one of the three MediaWiki tables."""
    expected = _TABLE_COLUMNS.get(table)
    if table not in _TABLE_COLUMNS:
        raise ValueError(f"unsupported table {table!r}")
    for row in iter_insert_tuples(source, table):
        if expected is not None and len(row) != expected:
            raise SqlSyntax(
                f"{table} row has {len(row)} columns, expected {expected}")
        if table == "categorylinks":
            yield CategoryLink(from_page_id=int(row[0]),
                               to_category_name=str(row[1]),
                               link_type=str(row[6]) or "page")
        elif table == "page":
            if len(row) < 3:
                raise SqlSyntax(
                    f"page row has {len(row)} columns, expected at least 3")
            yield PageRecord(page_id=int(row[0]), namespace=int(row[1]),
                             title=str(row[2]), text="")
        else:  # category
            yield {"cat_id": row[0], "cat_title": row[1], "cat_pages": row[2],
                   "cat_subcats": row[3], "cat_files": row[4]}


# --- category tree ---------------------------------------------------------

@dataclass
class CategoryNode:
    subcategories: list = field(default_factory=list)
    page_ids: list = field(default_factory=list)
    depth: int = 0


@dataclass
class CategoryTree:
    root: str
    nodes: dict
    max_depth: int

    def all_page_ids(self):
        out = set()
        for n in self.nodes.values():
            out.update(n.page_ids)
        return out


def build_category_tree(root, links, pages, max_depth):
    """Breadth-first category expansion from a root category name.

    ``links`` is an iterable of CategoryLink; ``pages`` maps page_id ->
    PageRecord (needed to resolve subcategory page ids to names).  Each
    category is expanded once, at its shallowest depth, which both guards
    cycles and keeps diamonds from blowing up.
    """
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    by_target = {}
    for link in links:
        by_target.setdefault(link.to_category_name, []).append(link)

    known = set(by_target)
    for rec in pages.values():
        if rec.namespace == NS_CATEGORY:
            known.add(rec.title)
    if root not in known:
        raise RootNotFound(f"category {root!r} not found")

    nodes = {root: CategoryNode(depth=0)}
    queue = deque([(root, 0)])
    while queue:
        cat, depth = queue.popleft()
        node = nodes[cat]
        children = sorted(by_target.get(cat, []),
                          key=lambda l: (l.link_type, l.from_page_id))
        for link in children:
            if link.link_type == "subcat":
                rec = pages.get(link.from_page_id)
                child_name = rec.title if rec is not None else f"cat#{link.from_page_id}"
                if depth + 1 > max_depth or child_name in nodes:
                    continue
                nodes[child_name] = CategoryNode(depth=depth + 1)
                node.subcategories.append(child_name)
                queue.append((child_name, depth + 1))
            elif link.link_type == "page":
                rec = pages.get(link.from_page_id)
                if rec is None or rec.namespace == NS_MAIN:
                    node.page_ids.append(link.from_page_id)
    return CategoryTree(root=root, nodes=nodes, max_depth=max_depth)


def filter_pages_by_category(tree, expressions):
    """Keep exactly the expressions whose page appears in the tree."""
    keep = tree.all_page_ids()
    return [e for e in expressions if e.page_id in keep]
