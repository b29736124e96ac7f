#pragma once

// Fixed prompt texts. Explainer, detection, fuzzing, surprisal, embedding and
// intervention prompts follow the published pipeline; the all-at-once
// simulation few-shot is a local convention.

#include <string>
#include <string_view>

namespace autointerp::prompts {

std::string_view explainer_system();
std::string_view explainer_cot_addendum();
/// Few-shot user turn, with or without activation lists.
std::string explainer_fewshot_user(bool with_activations);
std::string explainer_fewshot_assistant(bool cot);
inline constexpr std::string_view kInterpretationMarker = "[interpretation]:";

std::string_view detection_system();
std::string_view detection_fewshot_user();
std::string_view detection_fewshot_assistant();

std::string_view fuzzing_system();
std::string_view fuzzing_fewshot_user();
std::string_view fuzzing_fewshot_assistant();

/// Few-shot block that precedes every surprisal query.
std::string_view surprisal_fewshot();
inline constexpr std::string_view kPseudoInterpretation = "Various unrelated sentences";

std::string embedding_query(std::string_view interpretation);

std::string_view simulation_preamble();
inline constexpr std::string_view kSimulationUnknown = "unknown";

std::string_view intervention_explainer_preamble();
inline constexpr std::string_view kInterventionMarker = "interpretation:";
std::string_view intervention_scorer_fewshot();
inline constexpr std::string_view kAmplifiedPhrase = "The above passage contains an amplified amount of";

}  // namespace autointerp::prompts
