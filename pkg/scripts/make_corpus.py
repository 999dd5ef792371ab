#!/usr/bin/env python3
"""Generate the bundled desk-scale corpus.

Writes PTB-style files (lower case, whitespace tokens, one sentence per line,
numbers collapsed to ``N``) produced by a seeded stochastic grammar.  Paragraphs
keep a topic entity across several sentences so that recurrent state has
something to carry.

    python scripts/make_corpus.py src/egru_lm/corpus
"""
import random
import sys
from pathlib import Path

PEOPLE = """
anna ben clara david emma frank grace henry irene jack karen leo maria nathan
olivia peter rachel sam tina victor wendy xavier yvonne zach alice bruno carol
daniel elena felix gloria hugo isabel julian kate lucas mona nora oscar paula
quentin rosa simon teresa ulrich vera walter
""".split()

# singular, plural
NOUNS = [tuple(p.split("/")) for p in """
company/companies market/markets bank/banks farmer/farmers teacher/teachers
student/students doctor/doctors village/villages city/cities river/rivers
bridge/bridges road/roads train/trains ship/ships harbor/harbors island/islands
mountain/mountains forest/forests garden/gardens house/houses window/windows
door/doors table/tables letter/letters book/books story/stories song/songs
king/kings queen/queens soldier/soldiers merchant/merchants sailor/sailors
horse/horses dog/dogs cat/cats bird/birds fish/fishes wolf/wolves sheep/sheep
field/fields wall/walls tower/towers church/churches school/schools
market/markets council/councils report/reports price/prices share/shares
investor/investors worker/workers factory/factories machine/machines
engine/engines computer/computers program/programs network/networks
child/children friend/friends neighbor/neighbors brother/brothers
sister/sisters mother/mothers father/fathers stranger/strangers guest/guests
judge/judges lawyer/lawyers court/courts law/laws plan/plans idea/ideas
question/questions answer/answers problem/problems reason/reasons
storm/storms wind/winds cloud/clouds star/stars moon/moons lamp/lamps
candle/candles coin/coins ring/rings box/boxes bag/bags cart/carts boat/boats
apple/apples bread/breads cake/cakes cup/cups plate/plates knife/knives
painter/painters poet/poets singer/singers dancer/dancers player/players
team/teams game/games match/matches season/seasons year/years month/months
week/weeks day/days night/nights morning/mornings evening/evenings
office/offices manager/managers director/directors contract/contracts
deal/deals loan/loans tax/taxes budget/budgets profit/profits loss/losses
""".split()]

# base, third person, past, gerund
VERBS_T = [tuple(v.split("/")) for v in """
see/sees/saw/seeing find/finds/found/finding take/takes/took/taking
give/gives/gave/giving build/builds/built/building buy/buys/bought/buying
sell/sells/sold/selling carry/carries/carried/carrying follow/follows/followed/following
watch/watches/watched/watching help/helps/helped/helping call/calls/called/calling
visit/visits/visited/visiting paint/paints/painted/painting open/opens/opened/opening
close/closes/closed/closing answer/answers/answered/answering read/reads/read/reading
write/writes/wrote/writing keep/keeps/kept/keeping leave/leaves/left/leaving
bring/brings/brought/bringing meet/meets/met/meeting lose/loses/lost/losing
win/wins/won/winning hold/holds/held/holding move/moves/moved/moving
clean/cleans/cleaned/cleaning repair/repairs/repaired/repairing
examine/examines/examined/examining describe/describes/described/describing
announce/announces/announced/announcing approve/approves/approved/approving
reject/rejects/rejected/rejecting acquire/acquires/acquired/acquiring
""".split()]

VERBS_I = [tuple(v.split("/")) for v in """
sleep/sleeps/slept/sleeping arrive/arrives/arrived/arriving wait/waits/waited/waiting
laugh/laughs/laughed/laughing work/works/worked/working travel/travels/traveled/traveling
rest/rests/rested/resting sing/sings/sang/singing dance/dances/danced/dancing
fall/falls/fell/falling rise/rises/rose/rising return/returns/returned/returning
disappear/disappears/disappeared/disappearing complain/complains/complained/complaining
""".split()]

ADJ = """
old young small large quiet loud dark bright cold warm early late strong weak
rich poor happy sad busy empty full long short green red blue white black
golden silver ancient modern famous strange simple careful honest clever
brave gentle angry tired hungry heavy light narrow wide deep high low new
""".split()

ADV = """
quickly slowly quietly suddenly finally often rarely always never again soon
carefully happily sadly easily barely nearly
""".split()

PLACES = """
the_north the_south the_east the_west the_valley the_coast the_capital
the_old_town the_harbor the_market_square the_station
""".split()

PREPS = "in near behind under above beside across through along toward".split()
TIME = """
yesterday today tomorrow last_week last_year in_the_morning at_night
in_the_evening every_day every_year
""".split()

SAY = "said reported believed noted argued claimed".split()
CONJ = "and but while because although".split()

FEATURES = {p: ("she" if i % 2 == 0 else "he") for i, p in enumerate(PEOPLE)}


def spaced(tok):
    return tok.replace("_", " ")


class Grammar:
    def __init__(self, rng):
        self.rng = rng
        # skewed word choice so the unigram distribution is Zipf-like
        self.weights = {}

    def pick(self, seq, skew=1.1):
        key = id(seq)
        if key not in self.weights:
            self.weights[key] = [1.0 / (i + 1) ** skew for i in range(len(seq))]
        return self.rng.choices(seq, weights=self.weights[key])[0]

    def number(self):
        return "N"

    def noun_phrase(self, plural=None, topic=None):
        rng = self.rng
        if plural is None:
            plural = rng.random() < 0.3
        if topic is not None and rng.random() < 0.5:
            sing, plur = topic
        else:
            sing, plur = self.pick(NOUNS)
        head = plur if plural else sing
        det_roll = rng.random()
        words = []
        if plural:
            if det_roll < 0.5:
                words.append("the")
            elif det_roll < 0.7:
                words += [self.number()]
            elif det_roll < 0.85:
                words.append("some")
        else:
            words.append("the" if det_roll < 0.65 else "a")
        if rng.random() < 0.35:
            words.append(self.pick(ADJ))
        words.append(head)
        if rng.random() < 0.15:
            words += ["of", "the", self.pick(NOUNS)[0]]
        return words, plural

    def subject(self, topic, person):
        rng = self.rng
        roll = rng.random()
        if person is not None and roll < 0.35:
            return [FEATURES[person]], False
        if person is not None and roll < 0.55:
            return [person], False
        if roll < 0.65:
            return [self.pick(PEOPLE)], False
        return self.noun_phrase(topic=topic)

    def verb(self, forms, plural, subj):
        rng = self.rng
        roll = rng.random()
        base, third, past, ger = forms
        if roll < 0.5:
            return [past]
        if roll < 0.75:
            if subj in ("he", "she") or not plural:
                return [third]
            return [base]
        if roll < 0.9:
            aux = "were" if plural else "was"
            return [aux, ger]
        return ["will", base]

    def clause(self, topic, person):
        rng = self.rng
        subj, plural = self.subject(topic, person)
        out = list(subj)
        if rng.random() < 0.1:
            out.append(self.pick(ADV))
        if rng.random() < 0.7:
            out += self.verb(self.pick(VERBS_T), plural, subj[0])
            obj, _ = self.noun_phrase(topic=topic)
            out += obj
        else:
            out += self.verb(self.pick(VERBS_I), plural, subj[0])
        if rng.random() < 0.3:
            out += [self.pick(PREPS)]
            if rng.random() < 0.4:
                out += spaced(self.pick(PLACES)).split()
            else:
                np_, _ = self.noun_phrase(plural=False, topic=topic)
                out += np_
        if rng.random() < 0.15:
            out += spaced(self.pick(TIME)).split()
        return out

    def sentence(self, topic, person):
        rng = self.rng
        roll = rng.random()
        if roll < 0.12:
            who = [person] if person and rng.random() < 0.6 else self.noun_phrase(topic=topic)[0]
            s = list(who) + [self.pick(SAY), "that"] + self.clause(topic, person)
        elif roll < 0.3:
            s = self.clause(topic, person) + [self.pick(CONJ)] + self.clause(topic, person)
        elif roll < 0.37:
            s = ["in", self.number(), "the", self.pick(NOUNS)[1], "of"] + \
                spaced(self.pick(PLACES)).split() + self.clause(topic, person)
        else:
            s = self.clause(topic, person)
        return " ".join(s)

    def paragraph(self):
        rng = self.rng
        topic = self.pick(NOUNS, skew=0.6)
        person = self.pick(PEOPLE, skew=0.6) if rng.random() < 0.7 else None
        n = rng.randint(3, 8)
        return [self.sentence(topic, person) for _ in range(n)]


def generate(n_tokens, seed):
    g = Grammar(random.Random(seed))
    lines, count = [], 0
    while count < n_tokens:
        for s in g.paragraph():
            lines.append(s)
            count += len(s.split()) + 1
    return lines


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, n, seed in (("train", 100_000, 1), ("valid", 10_000, 2), ("test", 10_000, 3)):
        lines = generate(n, seed)
        (out / f"{split}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/egru_lm/corpus")
