//! Query-expansion prompt template.

use crate::error::{Error, Result};

const QUESTION_SLOT: &str = "{question}";
const OPTIONS_SLOT: &str = "{options}";

/// Prompt sent to the LLM. `{question}` and `{options}` are substituted by
/// [`render_expansion_prompt`].
pub const EXPANSION_TEMPLATE: &str = "\
Analyze the following video understanding question:

Question: {question}; Options: {options}

Step 1: Key Object Identification
    • Extract 3-5 core objects detectable by computer vision
    • Use Grounding dino compatible noun phrases (e.g., \"person\", \"mic\")
    • Format: Key Objects: obj1, obj2, obj3

Step 2: Contextual Cues
    • List 2-4 scene elements that help locate key objects based on options provided
    • Use detectable items (avoid abstract concepts)
    • Format: Cue Objects: cue1, cue2, cue3

Step 3: Relationship Triplets
    • Relationship types:
        • Spatial: Objects must appear in the same frame
        • Attribute: Color/size/material descriptions (e.g., \"red clothes\", \"large\")
        • Time: Appear in different frames within a few seconds
        • Causal: There is a temporal order between the objects
    • Format of Relations: (object, relation type, object), relation type should be exactly one of spatial/attribute/time/causal

Step 4: Description Augmentation
    • List 1-3 descriptions based on knowledge graph augmentation for each object
    • Entity descriptions (e.g., \"mic is a device for amplifying sound\")
    • Hypernym concepts (e.g., \"dog is a kind of animal\")
    • Format: Description: (object: des1; des2)

Step 5: Semantics Augmentation
    • List 2-5 Semantics information of query and options based on knowledge graph (e.g., \"leash often appears with dog\")
    • Format: Semantics: semantic1; semantic2

Output Rules
    1. One line each for Key Objects/Cue Objects/Relation/Des/Sem starting with exact prefixes
    2. Separate items with comma except for triplets where items are separated by semicolon
    3. Never use markdown or natural language explanations
    4. If you cannot identify any key objects or cue objects from the video provided, please just identify the possible key or cue objects from the question and options provided

Below is an example of the procedure:

Question: For \"When does the person in red clothes appear with the dog?\"

Response:
    Key Objects: person, dog, red clothes
    Cue Objects: grassy area, leash, fence
    Rel: (person; attribute; red clothes), (person; spatial; dog)
    Des: (red clothes: description1), (dog: description2)
    Sem: semantic1; semantic2

Format your response EXACTLY like this in Five lines:
    Key Objects: object1, object2
    Cue Objects: object3, object4
    Rel: (object1; relation type1; object2), (object3; relation type2; object4), ...
    Des: (object1: description1; description2), (object2: description1; description2), ...
    Sem: semantic1; semantic2, ...
";

/// Fills the template with the question and the answer options.
///
/// Options are joined with a single space, in order. Open-ended questions pass
/// an empty slice and leave the options slot empty.
pub fn render_expansion_prompt(question: &str, options: &[String]) -> Result<String> {
    let question = question.trim();
    if question.is_empty() {
        return Err(Error::invalid("question must be non-empty"));
    }
    let options = options
        .iter()
        .map(|o| o.trim())
        .filter(|o| !o.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    let (head, rest) = EXPANSION_TEMPLATE
        .split_once(QUESTION_SLOT)
        .expect("template has a question slot");
    let (mid, tail) = rest
        .split_once(OPTIONS_SLOT)
        .expect("template has an options slot");
    Ok(format!("{head}{question}{mid}{options}{tail}"))
}
