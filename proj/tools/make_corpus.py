#!/usr/bin/env python3
"""Generates the pinned toy corpus (data/corpus.txt).

Encyclopedia-style articles built from sentence templates. Every slot draws
from a Zipf-weighted list so the text has a learnable, skewed distribution.
The output is committed; rerunning with the same seed reproduces it.
"""

import argparse
import random

PLACES = ["Arden", "Belmor", "Calder", "Dunmere", "Elswick", "Farrow", "Glenholt",
          "Harrow", "Ivel", "Kelby", "Lanmouth", "Morwen", "Norcastle", "Oakridge",
          "Penrith", "Ravensby", "Stowe", "Tarnwick", "Wexley", "Yarrow"]
PEOPLE = ["John Carter", "Mary Hale", "Thomas Reed", "Anne Moore", "William Shaw",
          "Elizabeth Grey", "Henry Cole", "Margaret Lane", "Robert Price", "Alice Ward",
          "George Hunt", "Emma Stone", "Charles Bell", "Jane Fisher", "Edward Hart"]
REGIONS = ["the north", "the south", "the east", "the west", "the central valley",
           "the coast", "the highlands", "the lowlands"]
KINDS = ["town", "village", "city", "river", "castle", "church", "bridge", "railway station"]
ADJ = ["large", "small", "old", "famous", "historic", "important", "quiet", "busy", "new"]
YEARS = ["1850", "1901", "1924", "1877", "1945", "1812", "1966", "1789", "1903", "1931",
         "1858", "1999", "1620", "1715", "1882"]
NUMS = ["two", "three", "four", "five", "six", "ten", "twelve", "twenty", "several", "many"]
MATERIALS = ["stone", "brick", "timber", "iron", "granite", "sandstone"]
TRADES = ["farming", "fishing", "mining", "trade", "wool", "brewing", "shipbuilding", "tourism"]
EVENTS = ["a great fire", "a flood", "the war", "a long drought", "an outbreak of fever",
          "a storm", "the arrival of the railway"]
ROLES = ["mayor", "architect", "bishop", "engineer", "historian", "merchant", "poet"]
SECTIONS = ["History", "Geography", "Economy", "Architecture", "Culture", "Transport"]


def zipf_choice(rng, items, s=1.3):
    weights = [1.0 / (i + 1) ** s for i in range(len(items))]
    return rng.choices(items, weights=weights, k=1)[0]


def sentence(rng, name, kind):
    z = lambda items: zipf_choice(rng, items)
    templates = [
        lambda: f"The {kind} of {name} is located in {z(REGIONS)} of the county .",
        lambda: f"It was first recorded in {z(YEARS)} , when it was known as {z(PLACES)} .",
        lambda: f"In {z(YEARS)} the {kind} was rebuilt in {z(MATERIALS)} by the {z(ROLES)} {z(PEOPLE)} .",
        lambda: f"The local economy was based on {z(TRADES)} and {z(TRADES)} .",
        lambda: f"During {z(EVENTS)} in {z(YEARS)} , {z(NUMS)} houses were destroyed .",
        lambda: f"{name} is a {z(ADJ)} {kind} with {z(NUMS)} streets and a {z(ADJ)} market .",
        lambda: f"The {z(ROLES)} {z(PEOPLE)} was born in {name} in {z(YEARS)} .",
        lambda: f"A {z(MATERIALS)} bridge crosses the river near the centre of the {kind} .",
        lambda: f"The population of {name} grew after {z(EVENTS)} .",
        lambda: f"It is connected to {z(PLACES)} by a road built in {z(YEARS)} .",
        lambda: f"The church of {name} was built of {z(MATERIALS)} in {z(YEARS)} .",
        lambda: f"{z(NUMS).capitalize()} schools were opened in the {kind} in {z(YEARS)} .",
    ]
    return zipf_choice(rng, templates, s=0.6)()


def article(rng):
    name = zipf_choice(rng, PLACES, s=0.8)
    kind = zipf_choice(rng, KINDS)
    lines = [f" = {name} = ", ""]
    lines.append(" " + " ".join(sentence(rng, name, kind) for _ in range(rng.randint(2, 4))))
    lines.append("")
    for _ in range(rng.randint(1, 3)):
        lines.append(f" = = {zipf_choice(rng, SECTIONS)} = = ")
        lines.append("")
        lines.append(" " + " ".join(sentence(rng, name, kind) for _ in range(rng.randint(2, 5))))
        lines.append("")
    return "\n".join(lines) + "\n"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=20240611)
    ap.add_argument("--bytes", type=int, default=480_000)
    ap.add_argument("--out", default="data/corpus.txt")
    args = ap.parse_args()
    rng = random.Random(args.seed)
    parts, size = [], 0
    while size < args.bytes:
        a = article(rng)
        parts.append(a)
        size += len(a)
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(parts))


if __name__ == "__main__":
    main()
