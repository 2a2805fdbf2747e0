"""Mine weak category labels from a handful of captions.

    python3 demos/caption_mining.py

Shows the two stages separately: noun phrases per caption, then what the
generic-term filter keeps.
"""

from synseg.captions import CaptionRecord, ExclusionList, LexiconTagger, extract_noun_phrases, filter_generic

CAPTIONS = [
    "A dog in the park facing southwest",
    "the reflection of a cat",
    "a pair of shoes in front of the door",
    "Sunset over the ocean with background music",
    "running quickly",
]

tagger = LexiconTagger.default()
exclusion = ExclusionList.default()
for i, text in enumerate(CAPTIONS):
    phrases = extract_noun_phrases(CaptionRecord(f"c{i}", text), tagger)
    kept = filter_generic(phrases, exclusion)
    print(f"{text!r}\n  nouns: {phrases.phrases}\n  kept:  {kept.phrases}")
