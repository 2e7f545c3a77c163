#!/usr/bin/env python3
"""Regenerates crates/core/data/synthetic_posts.jsonl.

Writes 200 synthetic social media posts: comments about the Shingrix vaccine
grouped into topic clusters, comments about other vaccines, personal health
comments without a vaccine, and off-topic chatter. A few posts carry HTML
entities, links and @-mentions so the cleaning step has work to do.
Output is fully determined by SEED.
"""

import json
import random
import sys
from datetime import datetime, timedelta, timezone
from pathlib import Path

SEED = 20240611
OUT = Path(__file__).resolve().parent.parent / "crates/core/data/synthetic_posts.jsonl"

SHINGRIX_TOPICS = {
    "second_dose": [
        "The second dose of Shingrix knocked me out for two days.",
        "Second Shingrix dose gave me chills and a fever overnight.",
        "My second dose of Shingrix was much rougher than the first one.",
        "After the second Shingrix dose I was exhausted and achy all weekend.",
        "Everyone warned me the second dose of Shingrix is worse and they were right.",
        "The second Shingrix shot left me shivering with a fever all night.",
    ],
    "sore_arm": [
        "My arm was sore and swollen for three days after the Shingrix shot.",
        "Shingrix left a painful red patch on my arm for almost a week.",
        "The injection site from my Shingrix jab is still sore and itchy.",
        "Sore arm after Shingrix but nothing worse than a bad flu shot.",
        "My arm ached so much after the Shingrix shot that I could not lift it.",
    ],
    "cost": [
        "Shingrix costs over two hundred dollars a dose without insurance.",
        "The pharmacy wanted to charge me full price for Shingrix because my plan does not cover it.",
        "Worried about the cost of Shingrix since I need two doses.",
        "Shingrix is free for people over sixty five under the state program now.",
        "Insurance finally covered my Shingrix after months of arguing about the cost.",
    ],
    "availability": [
        "Our local pharmacy has a Shingrix shortage and a waiting list.",
        "Could not find Shingrix anywhere in town this month because of the shortage.",
        "The clinic ran out of Shingrix before my second dose was due.",
        "Shingrix stock is back at the pharmacy so book your second dose now.",
    ],
    "efficacy": [
        "Shingrix is over ninety percent effective at preventing shingles.",
        "I had shingles years ago and the pain was far worse than any Shingrix side effect.",
        "Getting Shingrix was worth it after watching my father suffer with shingles.",
        "My doctor says Shingrix protection against shingles lasts at least seven years.",
        "Shingrix prevents most shingles cases and the nerve pain that follows.",
    ],
    "hesitancy": [
        "I am scared to get Shingrix after reading about the side effects.",
        "Still unsure whether Shingrix is safe with my autoimmune condition.",
        "Anxious about the Shingrix reaction stories my friends keep sharing.",
        "Hesitant to book Shingrix because I cannot take two days off work.",
        "Not sure the Shingrix side effects are worth it at my age.",
    ],
    "schedule": [
        "The Shingrix second dose is due two to six months after the first.",
        "Missed my Shingrix second dose window and the nurse said it is still fine.",
        "Booked my Shingrix second dose for spring so I can rest afterwards.",
        "The reminder for the second Shingrix dose came right on schedule.",
    ],
}

SHINGRIX_FILLERS = [
    "Drink plenty of water beforehand.",
    "Rest the day after helps a lot.",
    "Glad it is done now.",
    "Would still recommend it to friends.",
    "The pharmacist was very helpful.",
]

OTHER_VACCINE = [
    "The flu shot this year barely hurt at all.",
    "Got my covid booster and the flu vaccine on the same day.",
    "Our school requires the measles vaccination for enrolment.",
    "The pneumonia vaccine was recommended by my GP this winter.",
    "Travel vaccinations for the trip cost more than the flights.",
    "RSV vaccines for older adults are now available at clinics.",
    "The whooping cough booster is recommended during pregnancy.",
    "Vaccination rates for measles dropped in our region.",
]

PERSONAL_HEALTH = [
    "I had a headache all week and felt tired.",
    "My back pain is worse after the long drive.",
    "I caught a cold and my fever finally broke today.",
    "Feeling dizzy and nauseous since lunch, I am staying home.",
    "My knee is swollen after the football match.",
    "I recovered from the stomach bug after three days.",
]

OFF_TOPIC = [
    "What a match last night, the home side played brilliantly.",
    "Traffic on the freeway was terrible this morning.",
    "New bakery on the corner makes excellent sourdough.",
    "The weather is perfect for a beach day.",
    "Anyone know a good plumber in the area.",
    "Finished a great novel over the long weekend.",
]

PLATFORMS = ["x", "reddit", "youtube", "facebook"]


def decorate(text, rng):
    """Adds cleaning work to some posts."""
    roll = rng.random()
    if roll < 0.08:
        return text + " More info https://example.org/vax?id=" + str(rng.randint(1, 999))
    if roll < 0.14:
        return "@" + rng.choice(["pharmaguy", "nurse_jo", "healthdept"]) + " " + text
    if roll < 0.19:
        return text.replace(" and ", " &amp; ", 1)
    return text


def main():
    rng = random.Random(SEED)
    start = datetime(2024, 3, 1, tzinfo=timezone.utc)
    posts = []

    topics = sorted(SHINGRIX_TOPICS)
    for i in range(130):
        topic = topics[i % len(topics)]
        pool = SHINGRIX_TOPICS[topic]
        first = pool[(i // len(topics)) % len(pool)]
        sentences = [first]
        if rng.random() < 0.5:
            other = rng.choice([s for s in pool if s != first])
            sentences.append(other)
        if rng.random() < 0.4:
            sentences.append(rng.choice(SHINGRIX_FILLERS))
        posts.append(decorate(" ".join(sentences), rng))

    for i in range(30):
        posts.append(decorate(OTHER_VACCINE[i % len(OTHER_VACCINE)], rng))
    for i in range(24):
        posts.append(PERSONAL_HEALTH[i % len(PERSONAL_HEALTH)])
    for i in range(16):
        posts.append(OFF_TOPIC[i % len(OFF_TOPIC)])

    order = list(range(len(posts)))
    rng.shuffle(order)
    lines = []
    for n, idx in enumerate(order):
        created = start + timedelta(hours=7 * n + rng.randint(0, 6))
        lines.append(
            json.dumps(
                {
                    "id": f"p{n + 1:04d}",
                    "platform": PLATFORMS[rng.randrange(len(PLATFORMS))],
                    "created_at": created.strftime("%Y-%m-%dT%H:%M:%SZ"),
                    "text": posts[idx],
                },
                ensure_ascii=False,
            )
        )
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else OUT
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(lines)} posts to {out}")


if __name__ == "__main__":
    main()
