"""
Rendering and parsing structured answers
========================================

One record, three output formats, and what the strict parser says about
the kinds of text small models actually produce.
"""

from dicekit import StructuredRecord, default_spec, parse, render

# a record holds the reasoning and the final answer
rec = StructuredRecord(reasoning="3 apples plus 4 apples is 7 apples.", answer="7", format_kind="xml")

# each (task, format) pair has a default template; render fills it in
for kind in ("xml", "json", "yaml"):
    spec = default_spec("numeric-qa", kind)
    text = render(StructuredRecord(rec.reasoning, rec.answer, kind), spec)
    print(f"--- {kind}")
    print(text)
    # parse is the inverse of render
    assert parse(text, spec).record.answer == "7"

# characters that are special in a format are escaped on the way out
tricky = StructuredRecord('a < b & "c" > d\nsecond line', "42", "xml")
xml_spec = default_spec("numeric-qa", "xml")
print("--- escaped xml")
print(render(tricky, xml_spec))
assert parse(render(tricky, xml_spec), xml_spec).record == tricky

# multiple-choice templates carry the option label too
mc = default_spec("multiple-choice", "json")
print("--- multiple choice keys:", list(mc.required_keys))

# now some imperfect model outputs
json_spec = default_spec("numeric-qa", "json")
outputs = {
    "prose around one block": 'Sure!\n{"reasoning": "4*3", "answer": "12"}\nDone.',
    "missing answer": '{"reasoning": "4*3"}',
    "two blocks": '{"reasoning": "a", "answer": "1"} {"reasoning": "b", "answer": "2"}',
    "number instead of string": '{"reasoning": "4*3", "answer": 12}',
    "plain prose": "The answer is 12.",
}
print("--- parse reports")
for label, text in outputs.items():
    rep = parse(text, json_spec)
    verdict = "valid" if rep.valid else f"{rep.failure_reason.value} ({rep.detail})"
    print(f"{label:28s} {verdict}")

# xml tags may come in any order, but must sit inside the single root
print(parse("<response><answer>7</answer><reasoning>r</reasoning></response>", xml_spec).valid)
print(parse("<reasoning>r</reasoning><answer>7</answer>", xml_spec).failure_reason.value)
