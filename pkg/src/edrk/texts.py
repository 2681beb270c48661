"""Label sets and free-text templates for chief complaints and SDoH notes.

The generator draws every free-text field from the phrase banks below, so each
synthetic text has a known gold category.  A minority of phrases per category
are deliberately ambiguous (keywords that point at a different category), which
keeps the offline keyword classifier honest instead of trivially perfect.
"""

from __future__ import annotations

import numpy as np

CHIEF_COMPLAINT = "chief_complaint"

COMPLAINT_LABELS = ("Infection", "Injury", "Pain", "Psychiatric", "Unclear")

SDOH_LABELS: dict[str, tuple[str, ...]] = {
    "alcohol": (
        "No Alcohol Use",
        "Current Alcohol Use",
        "Past Alcohol Use",
        "Occasional Use",
        "Recovering",
        "Unclear/Other",
    ),
    "exercise": (
        "No Exercise",
        "Light Exercise",
        "Moderate Exercise",
        "Vigorous Exercise",
        "Physical Therapy",
        "Unclear/Other",
    ),
    "home_environment": (
        "Independent",
        "Family Support",
        "Homeless",
        "Living with Friends",
        "Assisted Living",
        "Unstable Housing",
        "Unclear/Other",
    ),
    "nutrition": (
        "Moderate Nutrition",
        "Good Nutrition",
        "Poor Nutrition",
        "Special Diet",
        "Assistance Required",
        "Unclear/Other",
    ),
    "sexual_orientation": (
        "Heterosexual",
        "Gender Non-Binary",
        "Homosexual",
        "Transgender",
        "Bisexual",
        "Asexual",
        "Queer/Other",
        "Unclear/Other",
    ),
    "substance_abuse": (
        "No Use",
        "Recreational Use",
        "Current Use",
        "Former Use",
        "Prescribed Use",
        "Unclear/Other",
    ),
    "tobacco": (
        "Current Use",
        "No Use",
        "Former Use",
        "Occasional Use",
        "Prescribed Use",
        "Unclear/Other",
    ),
}

SDOH_KINDS = tuple(SDOH_LABELS)

SDOH_DISPLAY = {
    "alcohol": "Alcohol",
    "exercise": "Exercise",
    "home_environment": "Home Environment",
    "nutrition": "Nutrition",
    "sexual_orientation": "Sexual Orientation",
    "substance_abuse": "Substance Abuse",
    "tobacco": "Tobacco",
}


def label_set(task: str) -> tuple[str, ...]:
    """Closed label set for ``"chief_complaint"`` or an SDoH kind."""
    if task == CHIEF_COMPLAINT:
        return COMPLAINT_LABELS
    if task in SDOH_LABELS:
        return SDOH_LABELS[task]
    raise ValueError(f"unknown extraction task {task!r}")


def unclear_label(task: str) -> str:
    return "Unclear" if task == CHIEF_COMPLAINT else "Unclear/Other"


# (phrase, weight).  Phrases marked "# hard" are expected to fool the keyword rules.
COMPLAINT_PHRASES: dict[str, list[tuple[str, float]]] = {
    "Psychiatric": [
        ("suicidal ideation", 3.0),
        ("SI with plan to overdose", 1.5),
        ("hearing voices telling him to hurt others", 1.0),
        ("worsening depression", 2.0),
        ("anxiety attack", 1.5),
        ("paranoid and not sleeping", 1.0),
        ("requesting psych evaluation", 1.0),
        ("manic behavior per family", 1.0),
        ("homicidal thoughts", 0.5),
        ("panic attack with chest tightness", 1.0),
        ("alcohol withdrawal, shaking", 1.0),
        ("feels like giving up on everything", 0.6),  # hard
        ("brought in by police for erratic conduct", 0.5),  # hard
    ],
    "Pain": [
        ("chest pain", 3.0),
        ("abdominal pain", 2.5),
        ("lower back pain", 2.0),
        ("headache", 1.5),
        ("toothache", 0.7),
        ("flank pain", 0.8),
        ("leg pain", 1.0),
        ("migraine", 0.8),
        ("pelvic cramping", 0.5),
        ("chest pain after a fall last week", 0.5),  # hard
        ("abdominal pain with fever", 0.5),  # hard
        ("throbbing sensation in jaw", 0.3),  # hard
    ],
    "Injury": [
        ("fell off ladder, wrist deformity", 1.5),
        ("laceration to left hand", 1.5),
        ("assaulted, facial swelling", 1.2),
        ("MVC, restrained driver", 1.0),
        ("ankle sprain playing basketball", 0.8),
        ("dog bite to forearm", 0.6),
        ("possible fracture of right arm", 0.8),
        ("hit in head with bottle", 0.6),
        ("knuckle swelling after punching a wall", 0.5),  # hard
    ],
    "Infection": [
        ("fever and productive cough", 1.5),
        ("UTI symptoms", 1.0),
        ("cellulitis of left leg", 1.0),
        ("abscess on arm", 1.0),
        ("flu-like symptoms with chills", 1.0),
        ("possible pneumonia", 0.6),
        ("infected tattoo site", 0.5),
        ("burning with urination", 0.4),  # hard
        ("sore throat and swollen glands", 0.4),  # hard
    ],
    "Unclear": [
        ("generalized weakness", 1.0),
        ("dizzy", 1.0),
        ("medication refill", 1.0),
        ("feels unwell", 1.0),
    ],
}

_CC_PREFIX = ("", "", "pt reports ", "c/o ", "per triage: ", "patient states ")
_CC_SUFFIX = ("", "", " since yesterday", " for several days", ", worse today")

SDOH_PHRASES: dict[str, dict[str, list[tuple[str, float]]]] = {
    "tobacco": {
        "Current Use": [
            ("smokes 1 ppd", 2.0),
            ("current smoker, half pack daily", 2.0),
            ("vapes daily", 1.0),
            ("chews tobacco", 0.5),
            ("uses dip every morning", 0.3),  # hard
        ],
        "Former Use": [
            ("quit smoking 5 years ago", 2.0),
            ("former smoker", 2.0),
            ("smoked for 20 years, none since 2019", 0.4),  # hard
        ],
        "No Use": [("denies tobacco use", 2.0), ("never smoker", 2.0), ("non-smoker", 1.0)],
        "Occasional Use": [("occasional cigar", 1.0), ("smokes socially on weekends", 1.0)],
        "Prescribed Use": [("on nicotine patch", 1.0), ("prescribed varenicline", 1.0)],
        "Unclear/Other": [("", 2.0), ("not assessed", 1.0), ("see prior notes", 1.0)],
    },
    "alcohol": {
        "Current Alcohol Use": [
            ("drinks a six pack of beer daily", 2.0),
            ("etoh use, liquor nightly", 1.5),
            ("drinks wine every evening", 1.0),
            ("fifth of vodka a day", 0.4),  # hard
        ],
        "No Alcohol Use": [("denies alcohol use", 2.0), ("does not drink", 1.5), ("never drinks", 1.0)],
        "Past Alcohol Use": [("quit drinking last year", 1.5), ("history of heavy drinking, stopped", 1.5)],
        "Occasional Use": [("drinks occasionally", 1.5), ("social drinker on weekends", 1.5), ("a glass at holidays", 0.3)],  # last is hard
        "Recovering": [("in recovery, attends AA meetings", 1.0), ("sober for 2 years", 1.0)],
        "Unclear/Other": [("", 2.0), ("not assessed", 1.0), ("unable to obtain", 1.0)],
    },
    "substance_abuse": {
        "No Use": [("denies drug use", 2.0), ("no illicit drugs", 1.5), ("never used drugs", 1.0)],
        "Recreational Use": [("recreational marijuana", 1.5), ("smokes weed socially", 1.0)],
        "Current Use": [
            ("uses meth daily", 1.5),
            ("IVDU heroin", 1.0),
            ("cocaine use last night", 1.0),
            ("fentanyl use", 1.0),
            ("positive tox screen for amphetamines", 0.4),  # hard
        ],
        "Former Use": [("former cocaine user", 1.0), ("clean for 3 years", 1.0), ("history of opioid use, stopped", 1.0)],
        "Prescribed Use": [("on suboxone as prescribed", 1.0), ("methadone program", 1.0)],
        "Unclear/Other": [("", 2.0), ("not assessed", 1.0), ("pt declined to answer", 1.0)],
    },
    "exercise": {
        "No Exercise": [("no exercise", 2.0), ("sedentary lifestyle", 2.0), ("does not exercise", 1.0)],
        "Light Exercise": [("walks the dog daily", 1.5), ("light stretching and yoga", 1.0)],
        "Moderate Exercise": [("goes to the gym 3 times a week", 1.0), ("jogs twice weekly", 1.0), ("bikes to work", 0.5)],
        "Vigorous Exercise": [("runs marathons", 1.0), ("crossfit daily", 1.0)],
        "Physical Therapy": [("attending physical therapy", 1.0), ("rehab sessions for knee", 1.0)],
        "Unclear/Other": [("", 2.0), ("not assessed", 1.0), ("active at times", 0.6)],
    },
    "home_environment": {
        "Independent": [("lives alone in own apartment", 2.0), ("lives independently", 1.0), ("owns a house, lives by self", 0.5)],
        "Family Support": [("lives with mother", 1.5), ("lives with wife and kids", 1.5), ("family supportive at home", 1.0)],
        "Homeless": [("homeless", 2.0), ("staying at a shelter", 1.0), ("sleeps on the street", 1.0)],
        "Living with Friends": [("lives with a friend", 1.0), ("rents with roommates", 1.0)],
        "Assisted Living": [("resides in assisted living", 1.0), ("group home resident", 1.0)],
        "Unstable Housing": [("couch surfing", 1.0), ("facing eviction", 1.0), ("staying in a motel", 0.7)],
        "Unclear/Other": [("", 2.0), ("not assessed", 1.0), ("housing not discussed", 1.0), ("lives in town", 0.5)],
    },
    "nutrition": {
        "Moderate Nutrition": [("fair appetite", 1.5), ("adequate intake", 1.5), ("eats ok most days", 0.4)],
        "Good Nutrition": [("good appetite", 1.5), ("eats a healthy diet", 0.5), ("well nourished", 1.0)],  # middle is hard
        "Poor Nutrition": [("poor appetite", 1.5), ("skips meals", 1.0), ("malnourished appearing", 1.0), ("food insecure", 0.5)],
        "Special Diet": [("diabetic diet", 1.0), ("gluten free diet", 1.0), ("low sodium diet", 1.0)],
        "Assistance Required": [("needs assistance with meals", 1.0), ("tube feeds", 1.0), ("meals on wheels", 0.5)],
        "Unclear/Other": [("", 2.0), ("not assessed", 1.0), ("not documented", 1.0)],
    },
    "sexual_orientation": {
        "Heterosexual": [("heterosexual", 2.0), ("straight", 1.0)],
        "Gender Non-Binary": [("non-binary, uses they/them", 1.0), ("identifies as nonbinary", 1.0)],
        "Homosexual": [("gay", 1.0), ("lesbian", 1.0), ("homosexual", 1.0)],
        "Transgender": [("transgender woman", 1.0), ("transgender man", 1.0)],
        "Bisexual": [("bisexual", 1.0)],
        "Asexual": [("asexual", 1.0)],
        "Queer/Other": [("queer", 1.0), ("pansexual", 1.0)],
        "Unclear/Other": [("", 3.0), ("not assessed", 1.0), ("declined to answer", 1.0)],
    },
}

_SDOH_PREFIX = ("", "", "SH: ", "Social hx: ", "Pt reports ")
_SDOH_SUFFIX = ("", "", ".", " per pt.")


def _bank(task: str) -> dict[str, list[tuple[str, float]]]:
    if task == CHIEF_COMPLAINT:
        return COMPLAINT_PHRASES
    return SDOH_PHRASES[task]


def render_text(task: str, label: str, rng: np.random.Generator) -> str:
    """Draw one free-text string for ``label`` from the task's phrase bank."""
    phrases = _bank(task)[label]
    weights = np.array([w for _, w in phrases], dtype=float)
    phrase = phrases[rng.choice(len(phrases), p=weights / weights.sum())][0]
    if not phrase:
        return ""
    if task == CHIEF_COMPLAINT:
        prefix, suffix = _CC_PREFIX, _CC_SUFFIX
    else:
        prefix, suffix = _SDOH_PREFIX, _SDOH_SUFFIX
    return f"{prefix[rng.integers(len(prefix))]}{phrase}{suffix[rng.integers(len(suffix))]}"


def render_texts(task: str, labels, rng: np.random.Generator) -> list[str]:
    return [render_text(task, label, rng) for label in labels]
