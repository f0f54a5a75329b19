"""A small probabilistic English-like grammar and a typed error injector.

The language has determiner/noun number agreement, subject/verb agreement,
tense triggered by time adverbs (possibly several tokens away from the verb),
verb-specific prepositions and place-specific prepositions.  Those
dependencies are what both the GEC model and the masked LM can learn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ARTICLES = ("the", "a")
DET_SG = ("the", "a", "this", "every")
DET_PL = ("the", "these", "some")
PREPOSITIONS = ("in", "on", "at", "to", "for", "about", "with", "from", "of")
PUNCT = (",", ".")

AGENTS = ("dog", "cat", "boy", "girl", "teacher", "student", "doctor", "farmer", "painter", "driver",
          "baker", "nurse", "pilot", "singer", "writer", "player")
OBJECTS = ("book", "ball", "letter", "song", "picture", "car", "phone", "box", "bag", "key", "cake",
           "flower", "pear", "chair", "window", "door", "lamp", "map", "ticket", "gift")
PLACES = ("park", "garden", "kitchen", "city", "forest", "village", "school", "station", "office",
          "market", "harbor", "bank", "table", "roof", "bus", "train", "street", "bridge")
PLACE_PREPS = ("in", "at", "on")
ADJECTIVES = ("big", "small", "tall", "young", "happy", "tired", "red", "blue", "green", "quiet", "busy",
              "clever", "lazy", "kind", "grumpy")
TRANSITIVE = ("like", "want", "need", "visit", "watch", "help", "clean", "open", "paint", "follow", "call",
              "carry", "push", "wash", "kick")
PREP_VERBS = ("look", "listen", "wait", "talk", "depend", "agree", "laugh", "worry", "search", "belong",
              "rely", "care")
VERB_PREPS = ("at", "to", "for", "about", "on", "with")
INTRANSITIVE = ("walk", "jump", "smile", "dance", "play", "work", "rest", "cry")
PAST_TIME = (("yesterday",), ("last", "week"))
PRESENT_TIME = (("usually",), ("every", "day"))


def plural(noun: str) -> str:
    return noun + "es" if noun.endswith(("s", "x", "sh", "ch")) else noun + "s"


def third_person(verb: str) -> str:
    if verb.endswith(("s", "x", "sh", "ch")):
        return verb + "es"
    if verb.endswith("y") and verb[-2] not in "aeiou":
        return verb[:-1] + "ies"
    return verb + "s"


def past(verb: str) -> str:
    if verb.endswith("e"):
        return verb + "d"
    if verb.endswith("y") and verb[-2] not in "aeiou":
        return verb[:-1] + "ied"
    return verb + "ed"


@dataclass
class Grammar:
    """Collocation tables drawn from ``seed``; the word inventory is fixed."""

    seed: int = 0
    verb_prep: dict[str, str] = field(init=False)
    place_prep: dict[str, str] = field(init=False)
    verb_forms: dict[str, tuple[str, str, str]] = field(init=False)
    lemma_of: dict[str, str] = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        preps = [VERB_PREPS[i % len(VERB_PREPS)] for i in range(len(PREP_VERBS))]
        rng.shuffle(preps)
        self.verb_prep = dict(zip(PREP_VERBS, preps))
        places = [PLACE_PREPS[i % len(PLACE_PREPS)] for i in range(len(PLACES))]
        rng.shuffle(places)
        self.place_prep = dict(zip(PLACES, places))
        self.verb_forms = {v: (v, third_person(v), past(v)) for v in TRANSITIVE + PREP_VERBS + INTRANSITIVE}
        self.lemma_of = {form: v for v, forms in self.verb_forms.items() for form in forms}

    def words(self) -> list[str]:
        ws = set(DET_SG + DET_PL + PREPOSITIONS + PUNCT + ADJECTIVES + PLACES)
        ws.update(AGENTS + OBJECTS)
        ws.update(plural(n) for n in AGENTS + OBJECTS)
        ws.update(self.lemma_of)
        for phrase in PAST_TIME + PRESENT_TIME:
            ws.update(phrase)
        return sorted(ws)

    def _np(self, rng, nouns, p_adj=0.4):
        singular = rng.random() < 0.6
        det = DET_SG[rng.integers(len(DET_SG))] if singular else DET_PL[rng.integers(len(DET_PL))]
        out = [(det, "DET")]
        if rng.random() < p_adj:
            out.append((ADJECTIVES[rng.integers(len(ADJECTIVES))], "ADJ"))
        noun = nouns[rng.integers(len(nouns))]
        out.append((noun if singular else plural(noun), "NOUN"))
        return out, singular

    def sentence(self, rng: np.random.Generator) -> list[tuple[str, str]]:
        """One grammatical sentence as ``(word, tag)`` pairs."""
        time_kind = rng.choice(["past", "present", "none"], p=[0.4, 0.4, 0.2])
        position = rng.choice(["front", "end"]) if time_kind != "none" else None
        if time_kind == "past":
            adverb = PAST_TIME[rng.integers(len(PAST_TIME))]
            tense = "past"
        elif time_kind == "present":
            adverb = PRESENT_TIME[rng.integers(len(PRESENT_TIME))]
            tense = "present"
        else:
            adverb = ()
            tense = "past" if rng.random() < 0.5 else "present"

        out: list[tuple[str, str]] = []
        if position == "front":
            out += [(w, "TIME") for w in adverb] + [(",", "PUNCT")]
        subj, singular = self._np(rng, AGENTS)
        out += subj
        kind = rng.choice(["trans", "prep", "intrans"], p=[0.4, 0.4, 0.2])
        pool = {"trans": TRANSITIVE, "prep": PREP_VERBS, "intrans": INTRANSITIVE}[kind]
        lemma = pool[rng.integers(len(pool))]
        base, third, pst = self.verb_forms[lemma]
        verb = pst if tense == "past" else (third if singular else base)
        out.append((verb, "VERB"))
        if kind == "trans":
            out += self._np(rng, OBJECTS)[0]
        elif kind == "prep":
            out.append((self.verb_prep[lemma], "PREP"))
            out += self._np(rng, OBJECTS)[0]
        if rng.random() < 0.5:
            place = PLACES[rng.integers(len(PLACES))]
            out += [(self.place_prep[place], "PREP"), ("the", "DET"), (place, "NOUN")]
        if position == "end":
            out += [(w, "TIME") for w in adverb]
        out.append((".", "PUNCT"))
        return out


@dataclass
class Injection:
    type_tag: str
    anchor: int  # index of the affected token in the clean sentence


DEFAULT_PROFILE = {
    "DEL_ART": 0.12,
    "SUB_PREP": 0.2,
    "VERB_SUFFIX": 0.25,
    "PUNCT_DROP": 0.1,
    "CHAR_TYPO": 0.02,
    "OTHER": 0.01,
}


def typo(word: str, rng: np.random.Generator) -> str:
    """One random character operation that changes ``word``."""
    letters = "abcdefghijklmnopqrstuvwxyz"
    for _ in range(10):
        op = rng.integers(4)
        i = int(rng.integers(len(word)))
        if op == 0:
            w = word[:i] + letters[rng.integers(26)] + word[i + 1 :]
        elif op == 1 and len(word) > 1:
            w = word[:i] + word[i + 1 :]
        elif op == 2:
            w = word[:i] + letters[rng.integers(26)] + word[i:]
        elif len(word) > 1:
            i = min(i, len(word) - 2)
            w = word[:i] + word[i + 1] + word[i] + word[i + 2 :]
        else:
            continue
        if w != word:
            return w
    return word + "x"


def inject_errors(tagged: list[tuple[str, str]], profile: dict[str, float], grammar: Grammar,
                  rng: np.random.Generator) -> tuple[list[str], list[Injection]]:
    """Corrupt a clean tagged sentence; returns ``(source_tokens, injections)``.

    At most one error touches any token and a corrupted token is never directly
    followed by another corrupted one, so the alignment keeps errors apart.
    """
    for tag, rate in profile.items():
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"error rate for {tag} must lie in [0, 1], got {rate}")
    source: list[str] = []
    injections: list[Injection] = []
    previous_hit = False
    for idx, (word, tag) in enumerate(tagged):
        # one uniform draw per candidate type keeps the sampler's stream layout fixed
        candidates = []
        if word in ARTICLES:
            candidates.append("DEL_ART")
        if tag == "PREP":
            candidates.append("SUB_PREP")
        if tag == "VERB":
            candidates.append("VERB_SUFFIX")
        if tag == "PUNCT":
            candidates.append("PUNCT_DROP")
        if tag in ("NOUN", "ADJ", "VERB") and len(word) >= 3:
            candidates.append("CHAR_TYPO")
        candidates.append("OTHER")
        draws = rng.random(len(candidates))
        chosen = None
        if not previous_hit:
            for cand, u in zip(candidates, draws):
                if u < profile.get(cand, 0.0):
                    chosen = cand
                    break
        previous_hit = chosen is not None
        if chosen is None:
            source.append(word)
            continue
        injections.append(Injection(chosen, idx))
        if chosen in ("DEL_ART", "PUNCT_DROP"):
            continue
        if chosen == "SUB_PREP":
            options = [p for p in PREPOSITIONS if p != word]
            source.append(options[rng.integers(len(options))])
        elif chosen == "VERB_SUFFIX":
            options = [f for f in grammar.verb_forms[grammar.lemma_of[word]] if f != word]
            source.append(options[rng.integers(len(options))])
        elif chosen == "CHAR_TYPO":
            source.append(typo(word, rng))
        else:  # OTHER: duplicated word
            source.extend([word, word])
    return source, injections
