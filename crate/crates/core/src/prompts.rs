//! Frozen prompt templates. Placeholders are filled in a single pass, so
//! user text that happens to contain a placeholder is never re-expanded.

/// Ground-truth-guided pseudo-query prompt.
pub const QR_SUPERVISED: &str = "Find the common concepts between the conversation history that the seeker reveals and the ground truth movie, particularly paying attention to actor, producer, genre, topics, etc. Then, formulate a good natural-language search query for matching introduction of movies the seeker likes. Only output the query, do not include any explanation.

Conversation history: <conversation_history>

Ground truth items: <ground_truth_item>";

/// Inference-time reformulation prompt: the supervised prompt with the
/// ground-truth clause and line removed.
pub const QR_INFERENCE: &str = "Identify the concepts the seeker reveals, particularly paying attention to actor, producer, genre, topics, etc. Then, formulate a good natural-language search query for matching introduction of movies the seeker likes. Only output the query, do not include any explanation.

Conversation history: <conversation_history>";

/// One-shot reformulation with an untuned model.
pub const DIRECT_QUERY: &str = "Rewrite the following conversation into a short search query describing the movie the seeker wants. Only output the query.

<conversation_history>";

/// Item-generation prompt, shared by training records and inference.
pub const ITEM_GENERATION: &str = "A list of candidate movies and their abstracts are provided. According to the conversation history between seeker and recommender, select the top movie recommendation for the seeker from the candidate list. Only output one movie name. Do not generate explanation or anything else.

A list of candidate abstracts: <item_1> <item_2>, ..., <item_n>

The corresponding conversation history: <conversation_history>";

/// Sentence appended to the item-generation instruction for the
/// chain-of-thought variant.
pub const COT_INSTRUCTION: &str = "Think step by step.";

/// Asks for the preference summary that precedes the item name in
/// chain-of-thought training targets.
pub const COT_RATIONALE: &str = "Summarize the preferences the seeker reveals in the conversation history step by step, such as liked actors, directors, genres and topics. Do not name any specific movie.

Conversation history: <conversation_history>";

pub const HISTORY: &str = "<conversation_history>";
pub const GROUND_TRUTH: &str = "<ground_truth_item>";
pub const CANDIDATES: &str = "<item_1> <item_2>, ..., <item_n>";

/// Every placeholder used by the registry.
pub const PLACEHOLDERS: [&str; 3] = [HISTORY, GROUND_TRUTH, CANDIDATES];

/// The item-generation template with the chain-of-thought sentence added
/// to the end of its instruction paragraph.
pub fn item_generation_template(cot: bool) -> String {
    if !cot {
        return ITEM_GENERATION.to_string();
    }
    let (instruction, rest) = ITEM_GENERATION.split_once("\n\n").expect("template has paragraphs");
    format!("{instruction} {COT_INSTRUCTION}\n\n{rest}")
}

/// Replaces each placeholder in `template` with its value. Values are
/// inserted verbatim and never scanned for further placeholders.
///
/// Panics if `template` contains a placeholder without a value.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    loop {
        let next = PLACEHOLDERS
            .iter()
            .filter_map(|p| rest.find(p).map(|at| (at, *p)))
            .min_by_key(|(at, _)| *at);
        let Some((at, placeholder)) = next else {
            out.push_str(rest);
            return out;
        };
        let value = values
            .iter()
            .find(|(p, _)| *p == placeholder)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("no value for placeholder {placeholder}"));
        out.push_str(&rest[..at]);
        out.push_str(value);
        rest = &rest[at + placeholder.len()..];
    }
}
