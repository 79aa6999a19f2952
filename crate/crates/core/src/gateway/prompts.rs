//! Prompt templates for visual-text verification, visual-text extraction,
//! and caption generation.

const VERIFY_TEMPLATE: &str = r#"You are given a textual description of a species.

Your task is to determine whether the description contains any information about the species’ visible appearance (including features, colors, shapes, patterns, textures, or other morphological characteristics).

Respond strictly with: "Yes" or "No".

Examples:

"Bagada is a genus of moths of the family Noctuidae."
→ No

"Aetheolaena rosana is a species of flowering plant in the family Asteraceae. It is found only in Ecuador. Its natural habitat is subtropical or tropical moist montane forests. It is threatened by habitat loss."
→ No

"The fur of the African wild dog differs significantly from that of other canids, consisting entirely of stiff bristle-hairs with no underfur. Colour variation is extreme, and may serve in visual identification."
→ Yes

"The most characteristic physical feature of the raccoon is the area of black fur around the eyes, which contrasts sharply with the surrounding white face coloring."
→ Yes

Now classify the following description:

"{content}""#;

const EXTRACT_TEMPLATE: &str = r#"You are an expert taxonomy editor. Extract only the sentences (or partial sentences) that describe visual appearance:
- Colours, patterns, shapes, sizes, textures, diagnostic marks — anything visible in a photo.
- Visual differences in sex, form, or life stage should be preserved.
- Do not include behaviour, distribution, threats, taxonomy, dates, or references.
- Remove all non-visual parts from the original paragraph while maintaining sentence structure.
- Keep exactly the same descriptions from the original input; do not rewrite or rephrase.

Return exactly in the format:
<species> | <caption>

User Examples:

"The fur of the African wild dog differs significantly from that of other canids, consisting entirely of stiff bristle-hairs with no under-fur. Colour pattern is patchy black, yellow ochre and white."
→ Lycaon pictus | The fur of the African wild dog consists entirely of stiff bristle-hairs with no under-fur. Colour pattern is patchy black, yellow ochre and white.

"The most characteristic physical feature of the raccoon is the area of black fur around the eyes, which contrasts sharply with the surrounding white face colouring."
→ Procyon lotor | the area of black fur around the eyes, which contrasts sharply with the surrounding white face colouring.

"The male painted bunting is often described as the most beautiful bird in North America... Its colors, dark blue head, green back, red rump, and underparts, make it extremely easy to identify... The plumage of female and juvenile painted buntings is green and yellow-green... The adult female is a brighter, truer green than other similar songbirds."
→ Painted Bunting | The male painted bunting has a dark blue head, green back, red rump, and red underparts, making it extremely easy to identify, though it often hides in foliage. The female and juvenile painted buntings have green and yellow-green plumage, which serves as camouflage. The adult female is a brighter, truer green than other similar songbirds.

Now extract:

<species>: {species}

<description>: "{description}""#;

const CAPTION_HEAD: &str = "You are a biologist describing organisms based strictly on what is visible in the image.

Your goal is to produce a concise caption that highlights diagnostic, image-based traits.

Focus primarily on anatomical structures (e.g., color, shape, pattern, texture, position).

If clearly visible, you may mention substrate, scale cues, or explicit interactions.

Use precise biological terminology. Avoid vague or generic words.

Examples of good captions: {format_examples}
";

const CAPTION_EXCERPT: &str = "
If a Wikipedia excerpt is available:
Reference excerpt about {species_name}, use only to standardize correct terms that match visible traits; do not copy text; do not add traits not visible in the image: {wiki_excerpt}.
";

const CAPTION_TAIL: &str = "
The caption must not exceed {word_limit} words.

Include the species name \"{species_name}\" naturally in the sentence.

Priority order:
(1) the most diagnostic visible trait,
(2) a secondary distinctive trait,
(3) a contextual detail only if it strengthens identification.

Final instruction: For the following image of a {species_name}, write a single, concise sentence describing its visible traits.";

/// Renders the yes/no visual-content check for one paragraph.
pub fn verification_prompt(content: &str) -> String {
    VERIFY_TEMPLATE.replace("{content}", content)
}

/// Renders the `<species> | <caption>` extraction prompt.
pub fn extraction_prompt(species: &str, description: &str) -> String {
    // Species first: a description could contain the literal `{species}`.
    EXTRACT_TEMPLATE
        .replace("{species}", species)
        .replace("{description}", description)
}

/// Format examples as a numbered list, one per line.
pub fn format_example_list(examples: &[String]) -> String {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| format!("\n{}. {}", i + 1, e.trim()))
        .collect()
}

/// Renders the caption prompt. The excerpt block is omitted entirely when
/// there is no excerpt.
pub fn caption_prompt(species_name: &str, format_examples: &[String], wiki_excerpt: Option<&str>, word_limit: usize) -> String {
    let mut out = CAPTION_HEAD.replace("{format_examples}", &format_example_list(format_examples));
    if let Some(excerpt) = wiki_excerpt.map(str::trim).filter(|e| !e.is_empty()) {
        out.push_str(
            &CAPTION_EXCERPT
                .replace("{species_name}", species_name)
                .replace("{wiki_excerpt}", excerpt.trim_end_matches('.')),
        );
    }
    out.push_str(
        &CAPTION_TAIL
            .replace("{word_limit}", &word_limit.to_string())
            .replace("{species_name}", species_name),
    );
    out
}

/// Follow-up instruction appended to the caption prompt after a reply that
/// broke the length or naming constraints.
pub fn caption_correction(previous: &str, over_limit: bool, missing_name: bool, species_name: &str, word_limit: usize) -> String {
    let mut problems = Vec::new();
    if over_limit {
        problems.push(format!("it is longer than {word_limit} words"));
    }
    if missing_name {
        problems.push(format!("it does not mention \"{species_name}\""));
    }
    if problems.is_empty() {
        problems.push("it is empty".to_string());
    }
    format!(
        "\n\nYour previous caption was rejected because {}:\n\"{}\"\nWrite a new single sentence of at most {word_limit} words that includes \"{species_name}\".",
        problems.join(" and "),
        previous.trim()
    )
}
