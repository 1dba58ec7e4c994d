"""Prompt templates, CIDEr, exact match and the evaluation loop."""
import json
import math
import string
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ContractError, no_grad

VIS_SLOT = "<VIS>"


@dataclass(frozen=True)
class PromptTemplate:
    task: str
    text: str


CAPTION_TEMPLATE = PromptTemplate("caption", "Describe the following: {visual} :")
_QA_HEAD = "Answer the question given the images.\n\n"
_QA_TAIL = "Given {visual}\nQuestion: {question}?\n"
QA_TEMPLATES = {
    "image_qa": PromptTemplate("image_qa", _QA_HEAD + "{pseudo_examples}" + _QA_TAIL + "Answer:"),
    "video_qa": PromptTemplate(
        "video_qa", _QA_HEAD + "{pseudo_examples}" + _QA_TAIL + "Answer in exactly one word:"),
}
TEMPLATES = {"caption": CAPTION_TEMPLATE, **QA_TEMPLATES}


def render_prompt(template, question=None, pseudo=()):
    """Fill a template.  ``pseudo`` is a list of text-only ``(question, answer)``
    examples placed before the visual block; questions carry no "?"."""
    if template.task == "caption":
        if pseudo:
            raise ValueError("captioning prompts take no pseudo examples")
        return template.text.format(visual=VIS_SLOT)
    if question is None:
        raise ValueError(f"{template.task} prompt needs a question")
    block = "".join(f"Given\nQuestion: {q}?\nAnswer: {a}\n\n" for q, a in pseudo)
    return template.text.format(visual=VIS_SLOT, question=question, pseudo_examples=block)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def normalize_answer(text):
    text = text.lower().translate(str.maketrans("", "", string.punctuation))
    return " ".join(text.split())


def exact_match(pred, ref):
    return float(normalize_answer(pred) == normalize_answer(ref))


def _ngrams(words, n):
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _tfidf(counts, df, log_n):
    vec = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in counts.items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider(candidates, references, n_max=4):
    """Corpus CIDEr: TF-IDF n-gram cosine, averaged over n=1..n_max and over
    references, scaled by 10, then averaged over items.

    ``references`` is a list whose items are a string or a list of strings.
    Document frequencies come from the references of the corpus itself.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if not candidates:
        raise ValueError("empty corpus")
    refs = [[r] if isinstance(r, str) else list(r) for r in references]
    df = Counter()
    for item in refs:
        seen = set()
        for r in item:
            w = r.split()
            for n in range(1, n_max + 1):
                seen.update(_ngrams(w, n))
        df.update(seen)
    log_n = math.log(float(len(refs)))
    scores = []
    for cand, item in zip(candidates, refs):
        cw = cand.split()
        per_ref = []
        for r in item:
            rw = r.split()
            sims = []
            for n in range(1, n_max + 1):
                vc, nc = _tfidf(_ngrams(cw, n), df, log_n)
                vr, nr = _tfidf(_ngrams(rw, n), df, log_n)
                dot = sum(v * vr.get(g, 0.0) for g, v in vc.items())
                sims.append(dot / (nc * nr) if nc and nr else 0.0)
            per_ref.append(sum(sims) / n_max)
        scores.append(10.0 * sum(per_ref) / len(per_ref))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# evaluation loop
# --------------------------------------------------------------------------

@dataclass
class TaskReport:
    cider: float
    exact_match: float
    token_accuracy: float
    n_samples: int
    pseudo_examples: int = 0


@dataclass
class EvalReport:
    tasks: dict = field(default_factory=dict)
    config_digest: str = ""
    checkpoint_tag: str = ""

    def to_json(self):
        return json.dumps(
            {"tasks": {k: asdict(v) for k, v in self.tasks.items()},
             "config_digest": self.config_digest, "checkpoint_tag": self.checkpoint_tag},
            indent=2, sort_keys=True)


def pseudo_examples(train_samples, count, seed):
    """Text-only QA pairs drawn from the training split with a fixed seed."""
    if count == 0:
        return []
    rng = np.random.default_rng([seed, 4242])
    pick = rng.choice(len(train_samples), size=count, replace=False)
    return [(train_samples[i].question, train_samples[i].answer) for i in sorted(pick)]


def _task_pairs(task, samples, pseudo):
    if task == "caption":
        prompt = render_prompt(CAPTION_TEMPLATE)
        return [(prompt, s.caption) for s in samples]
    if task not in QA_TEMPLATES:
        raise ContractError(f"unknown evaluation task {task!r}")
    tpl = QA_TEMPLATES[task]
    return [(render_prompt(tpl, s.question, pseudo), s.answer) for s in samples]


def evaluate(system, samples, tasks=("caption",), features=None, pseudo=(), batch_size=64,
             max_new=20, predictions=None):
    """Greedy-decode every sample under each task prompt and score it.

    ``system`` is a :class:`vlab.pipeline.VisionLanguageModel`; ``features`` are
    the frozen encoder outputs for ``samples`` (computed when omitted).
    ``predictions`` (task -> list of strings) bypasses decoding, which lets an
    oracle be scored through the same code path.
    """
    from .data import collate

    tok = system.tokenizer
    if features is None:
        features = system.encode_samples(samples)
    report = EvalReport()
    for task in tasks:
        pairs = _task_pairs(task, samples, pseudo)
        refs = [p[1] for p in pairs]
        correct = total = 0.0
        preds = [None] * len(samples)
        with no_grad():
            for lo in range(0, len(samples), batch_size):
                sl = slice(lo, lo + batch_size)
                batch = collate(pairs[sl], tok, np.arange(len(samples))[sl])
                c, t = system.token_accuracy(batch, features[sl])
                correct += c
                total += t
                if predictions is None:
                    _decode_groups(system, pairs, features, range(lo, min(lo + batch_size, len(samples))),
                                   preds, max_new)
        if predictions is not None:
            preds = list(predictions[task])
        em = float(np.mean([exact_match(p, r) for p, r in zip(preds, refs)]))
        cid = cider([normalize_answer(p) for p in preds], [normalize_answer(r) for r in refs])
        report.tasks[task] = TaskReport(cid, em, correct / total, len(samples), len(pseudo))
    return report


def _decode_groups(system, pairs, features, idx, preds, max_new):
    # rows in one decode call must share the prompt length
    tok = system.tokenizer
    groups = {}
    for i in idx:
        ids = [tok.bos_id] + tok.encode(pairs[i][0], allow_vis=True)
        groups.setdefault(len(ids), []).append((i, ids))
    for _, rows in sorted(groups.items()):
        order = [i for i, _ in rows]
        prompt = np.array([ids for _, ids in rows], dtype=np.int64)
        out = system.generate(prompt, features[order], max_new)
        for i, ids in zip(order, out):
            preds[i] = tok.decode(ids)

