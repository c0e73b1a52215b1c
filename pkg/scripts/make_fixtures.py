#!/usr/bin/env python3
"""Generate the frozen test fixtures: a 200-query gold corpus covering the
LC-QuAD 1.0/2.0 query shapes, and a 50-question mini dataset for pipeline
and overfit tests.  Deterministic; rerunning reproduces the same files."""

import json
import random
from pathlib import Path

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

ENTITY_LABELS = [
    ("Q76", "Barack Obama"), ("Q2084454", "Olympic-size swimming pool"),
    ("Q937", "Albert Einstein"), ("Q42", "Douglas Adams"), ("Q90", "Paris"),
    ("Q64", "Berlin"), ("Q1055", "Hamburg"), ("Q183", "Germany"),
    ("Q30", "United States"), ("Q5582", "Vincent van Gogh"),
    ("Q692", "William Shakespeare"), ("Q1339", "Johann Sebastian Bach"),
    ("Q7259", "Ada Lovelace"), ("Q7186", "Marie Curie"), ("Q935", "Isaac Newton"),
    ("Q8409", "Alexander the Great"), ("Q517", "Napoleon"), ("Q9682", "Elizabeth II"),
    ("Q11571", "Akira Kurosawa"), ("Q882", "Steven Spielberg"),
]
RELATION_LABELS = [
    ("P31", "instance of"), ("P5066", "operating temperature"), ("P26", "spouse"),
    ("P19", "place of birth"), ("P106", "occupation"), ("P69", "educated at"),
    ("P50", "author"), ("P57", "director"), ("P161", "cast member"),
    ("P36", "capital"), ("P17", "country"), ("P571", "inception"),
    ("P2044", "elevation"), ("P2046", "area"), ("P1082", "population"),
]
DBP_ENTITIES = [
    ("Dolley_Madison", "Dolley Madison"), ("Barack_Obama", "Barack Obama"),
    ("Scarface", "Scarface"), ("Germany", "Germany"), ("London", "London"),
    ("Albert_Einstein", "Albert Einstein"), ("Mount_Everest", "Mount Everest"),
    ("Amazon_River", "Amazon River"), ("Taj_Mahal", "Taj Mahal"),
    ("Great_Wall_of_China", "Great Wall of China"),
]
DBP_RELATIONS = [
    ("spouse", "spouse"), ("birthPlace", "birth place"), ("author", "author"),
    ("notableWork", "notable work"), ("director", "director"),
    ("capital", "capital"), ("elevation", "elevation"), ("populationTotal", "population total"),
]


def wikidata_queries(rng, n):
    out = []
    for _ in range(n):
        e = rng.choice(ENTITY_LABELS)[0]
        e2 = rng.choice(ENTITY_LABELS)[0]
        r = rng.choice(RELATION_LABELS)[0]
        r2 = rng.choice(RELATION_LABELS)[0]
        num = f"{rng.randint(1, 9999)}.{rng.randint(0, 9)}"
        shape = rng.randrange(7)
        if shape == 0:
            q = f"ASK WHERE {{ wd:{e} wdt:{r} ?obj FILTER ( ?obj = {num} ) }}"
        elif shape == 1:
            q = f"SELECT ?ans WHERE {{ wd:{e} wdt:{r} ?ans }}"
        elif shape == 2:
            q = f"SELECT ?ans WHERE {{ wd:{e} wdt:{r} ?x . ?x wdt:{r2} ?ans }}"
        elif shape == 3:
            q = f"SELECT ( COUNT ( ?x ) AS ?count ) WHERE {{ ?x wdt:{r} wd:{e} }}"
        elif shape == 4:
            q = (
                f"SELECT ?ans WHERE {{ {{ wd:{e} wdt:{r} ?ans }} UNION "
                f"{{ wd:{e2} wdt:{r2} ?ans }} }}"
            )
        elif shape == 5:
            q = (
                f"SELECT ?ans ?lab WHERE {{ wd:{e} wdt:{r} ?ans . "
                f"OPTIONAL {{ ?ans wdt:{r2} ?lab }} }} LIMIT 5"
            )
        else:
            q = f"SELECT ?ans WHERE {{ wd:{e} p:{r} ?st . ?st ps:{r} ?ans }} LIMIT 10"
        out.append(q)
    return out


def dbpedia_queries(rng, n):
    out = []
    res = "http://dbpedia.org/resource/"
    onto = "http://dbpedia.org/ontology/"
    prop = "http://dbpedia.org/property/"
    for _ in range(n):
        e = rng.choice(DBP_ENTITIES)[0]
        e2 = rng.choice(DBP_ENTITIES)[0]
        r = rng.choice(DBP_RELATIONS)[0]
        r2 = rng.choice(DBP_RELATIONS)[0]
        shape = rng.randrange(4)
        if shape == 0:
            q = f"SELECT ?uri WHERE {{ <{res}{e}> <{onto}{r}> ?uri }}"
        elif shape == 1:
            q = f"ASK WHERE {{ <{res}{e}> <{prop}{r}> <{res}{e2}> }}"
        elif shape == 2:
            q = (
                f"SELECT ( COUNT ( ?uri ) AS ?count ) WHERE "
                f"{{ ?uri <{onto}{r}> <{res}{e}> }}"
            )
        else:
            q = (
                f"SELECT ?uri WHERE {{ ?x <{onto}{r}> <{res}{e}> . "
                f"?x <{onto}{r2}> ?uri }}"
            )
        out.append(q)
    return out


def mini_dataset(rng, n):
    records = []
    for i in range(n):
        e_id, e_lab = rng.choice(ENTITY_LABELS)
        r_id, r_lab = rng.choice(RELATION_LABELS)
        shape = rng.randrange(3)
        num = f"{rng.randint(1, 999)}.{rng.randint(0, 9)}"
        if shape == 0:
            question = f"Is it true that {e_lab}'s {r_lab} is equal to {num} ?"
            sparql = f"ASK WHERE {{ wd:{e_id} wdt:{r_id} ?obj FILTER ( ?obj = {num} ) }}"
        elif shape == 1:
            question = f"What is the {r_lab} of {e_lab} ?"
            sparql = f"SELECT ?ans WHERE {{ wd:{e_id} wdt:{r_id} ?ans }}"
        else:
            question = f"How many things have {e_lab} as their {r_lab} ?"
            sparql = f"SELECT ( COUNT ( ?x ) AS ?count ) WHERE {{ ?x wdt:{r_id} wd:{e_id} }}"
        records.append(
            {"id": f"q{i:03d}", "question": question, "sparql": sparql, "kg": "wikidata"}
        )
    return records


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20220711)
    queries = wikidata_queries(rng, 120) + dbpedia_queries(rng, 80)
    (FIXTURES / "gold_queries.txt").write_text("\n".join(queries) + "\n", encoding="utf-8")
    records = mini_dataset(random.Random(7), 50)
    (FIXTURES / "mini_dataset.json").write_text(
        json.dumps(records, indent=1), encoding="utf-8"
    )
    print(f"wrote {len(queries)} gold queries and {len(records)} mini-dataset records")


if __name__ == "__main__":
    main()
