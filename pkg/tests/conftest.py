import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from legalsynth.corpus import Corpus, Passage  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"

SAMPLE_HEADER = (
    "Mục 1. CHUẨN BỊ THANH TRA, Chương II. TRÌNH TỰ, THỦ TỤC TIẾN HÀNH CUỘC THANH TRA THEO KẾ HOẠCH THANH TRA, "
    "Thông tư 36/2016/TT-NHNN quy định về trình tự, thủ tục thanh tra chuyên ngành Ngân hàng do Thống đốc "
    "Ngân hàng Nhà nước Việt Nam ban hành."
)
SAMPLE_CONTENT = (
    '5. Trưởng đoàn thanh tra tổ chức họp Đoàn thanh tra để phổ biến kế hoạch tiến hành thanh tra được duyệt và phân công nhiệm vụ cho các Tổ thanh tra, Nhóm thanh tra, các thành viên của Đoàn thanh tra; thảo luận, quyết định về phương pháp, cách thức tổ chức tiến hành thanh tra; sự phối hợp giữa các thành viên Đoàn thanh tra, các cơ quan, đơn vị có liên quan trong quá trình triển khai thanh tra. Trong trường hợp cần thiết, người ra quyết định thanh tra hoặc người được người ra quyết định thanh tra ủy quyền dự họp và quán triệt mục đích, yêu cầu, nội dung thanh tra và nhiệm vụ của Đoàn thanh tra. Việc phân công nhiệm vụ cho các Tổ thanh tra, Nhóm thanh tra, các thành viên Đoàn thanh tra phải thể hiện bằng văn bản. 6. Tổ trưởng thanh tra, Nhóm trưởng thanh tra, thành viên Đoàn thanh tra xây dựng kế hoạch thực hiện nhiệm vụ được phân công và báo cáo Trưởng đoàn thanh tra trước khi thực hiện thanh tra tại tổ chức tín dụng.'
)


@pytest.fixture
def sample_passage():
    return Passage("tt36:5", "tt36", "Tiền tệ - Ngân hàng", "Thông tư 36/2016/TT-NHNN", SAMPLE_HEADER, SAMPLE_CONTENT)


def make_corpus(texts, doc_size=1):
    return Corpus(
        Passage(f"p{i:03d}", f"d{i // doc_size:03d}", "dom", "title", "hdr", t) for i, t in enumerate(texts)
    )


@pytest.fixture
def small_corpus():
    return make_corpus(["a b", "b c", "c d e", "thanh tra ngân hàng", "a a a b"])


def random_texts(rng: np.random.Generator, n: int, vocab: int = 12, length=(1, 12)):
    words = [f"w{i}" for i in range(vocab)]
    return [" ".join(rng.choice(words, size=int(rng.integers(*length)))) for _ in range(n)]


def doc_record(doc_id, sections, domain="dom", title="title"):
    return json.dumps(
        {"id": doc_id, "domain": domain, "title": title, "sections": [{"header": h, "body": b} for h, b in sections]},
        ensure_ascii=False,
    )


def random_eval_instance(rng: np.random.Generator, max_docs: int = 20, max_queries: int = 10):
    """Random (run, qrels, sources, passage_doc) with <= max_docs passages and <= max_queries queries."""
    n_docs = int(rng.integers(1, max_docs + 1))
    pids = [f"p{i:02d}" for i in range(n_docs)]
    passage_doc = {p: f"d{int(rng.integers(0, max(1, n_docs // 3)))}" for p in pids}
    run, qrels, sources = {}, {}, {}
    for j in range(int(rng.integers(1, max_queries + 1))):
        qid = f"q{j}"
        if rng.random() < 0.9:
            depth = int(rng.integers(0, n_docs + 1))
            chosen = list(rng.choice(pids, size=depth, replace=False))
            scores = np.round(rng.random(depth), 1)
            run[qid] = sorted(zip(chosen, scores.tolist()), key=lambda t: (-t[1], t[0]))
        if rng.random() < 0.9:
            judged = rng.choice(pids, size=int(rng.integers(0, n_docs + 1)), replace=False)
            qrels[qid] = {p: int(rng.integers(0, 3)) for p in judged}
        src = pids[int(rng.integers(n_docs))]
        sources[qid] = (src, passage_doc[src])
    return run, qrels, sources, passage_doc


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
