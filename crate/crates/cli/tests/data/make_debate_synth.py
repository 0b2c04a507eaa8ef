"""Regenerates debate_synth.jsonl: synthetic argument/question/summary triplets."""
import json
import random

TOPICS = ["nuclear power", "school uniforms", "carbon taxes", "online voting", "space exploration",
          "animal testing", "wind farms", "free trade", "public transit", "genetic crops",
          "death penalty", "minimum wage", "video surveillance", "organ donation", "rent control",
          "homeschooling", "fast food", "social media", "military drafts", "open borders"]
ASPECTS = {
    "cost": ["expensive", "budget", "taxpayers", "prices", "subsidies", "spending"],
    "safety": ["dangerous", "accidents", "risks", "harm", "injuries", "protection"],
    "economy": ["jobs", "growth", "markets", "wages", "business", "investment"],
    "freedom": ["rights", "liberty", "choice", "privacy", "individuals", "consent"],
    "environment": ["pollution", "emissions", "climate", "nature", "wildlife", "resources"],
    "health": ["disease", "wellbeing", "patients", "nutrition", "doctors", "lives"],
}
GROUPS = ["citizens", "families", "students", "workers", "governments", "communities", "children", "experts"]
CONNECT = ["moreover", "however", "in fact", "critics argue that", "supporters claim that", "evidence shows that"]
VERBS_PRO = ["improves", "protects", "supports", "strengthens", "benefits"]
VERBS_CON = ["threatens", "undermines", "damages", "reduces", "burdens"]
QUESTION = ["is", "does", "should", "can"]


def sentence(rng, topic, aspect, stance):
    words = ASPECTS[aspect]
    verb = rng.choice(VERBS_PRO if stance else VERBS_CON)
    group = rng.choice(GROUPS)
    return "{} {} {} the {} of {} because {} and {} matter to {} .".format(
        rng.choice(CONNECT), topic, verb, rng.choice(words), group,
        rng.choice(words), rng.choice(words), rng.choice(GROUPS))


def record(rng, i):
    topic = rng.choice(TOPICS)
    aspect = rng.choice(sorted(ASPECTS))
    stance = rng.random() < 0.5
    others = [a for a in sorted(ASPECTS) if a != aspect]
    sents = [sentence(rng, topic, a, rng.random() < 0.5) for a in rng.sample(others, 4)]
    sents.insert(rng.randrange(len(sents) + 1), sentence(rng, topic, aspect, stance))
    review = " ".join(sents)
    q = "{} {} good or bad for {} when we consider {} and {} ?".format(
        rng.choice(QUESTION), topic, rng.choice(GROUPS), aspect, rng.choice(ASPECTS[aspect]))
    verb = rng.choice(VERBS_PRO if stance else VERBS_CON)
    tip = "{} {} {} and {} for {} .".format(topic, verb, aspect, rng.choice(ASPECTS[aspect]), rng.choice(GROUPS))
    return {"id": "d{:03d}".format(i), "review": review, "query": q, "tip": tip}


def main():
    rng = random.Random(20190415)
    with open("debate_synth.jsonl", "w") as f:
        for i in range(500):
            f.write(json.dumps(record(rng, i)) + "\n")


if __name__ == "__main__":
    main()
