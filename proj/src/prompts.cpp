#include "autointerp/prompts.hpp"

namespace autointerp::prompts {

std::string_view explainer_system() {
  return R"(You are a meticulous AI researcher conducting an important investigation into patterns found in language. Your task is to analyze text and provide an interpretation that thoroughly encapsulates possible patterns found in it.
Guidelines:

You will be given a list of text examples on which special words are selected and between delimiters like << this >>. If a sequence of consecutive tokens all are important, the entire sequence of tokens will be contained between delimiters <<just like this>>. How important each token is for the behavior is listed after each example in parentheses.

- Try to produce a concise final description. Simply describe the text features that are common in the examples, and what patterns you found.

- If the examples are uninformative, you don't need to mention them. Don't focus on giving examples of important tokens, but try to summarize the patterns found in the examples.

- Do not mention the marker tokens (<< >>) in your interpretation.

- Do not make lists of possible interpretations. Keep your interpretations short and concise.

- The last line of your response must be the formatted interpretation, using [interpretation]:)";
}

std::string_view explainer_cot_addendum() {
  return R"(To better find the interpretation for the language patterns, go through the following stages:

1.Find the special words that are selected in the examples and list a couple of them. Search for patterns in these words, if there are any. Don't list more than 5 words.

2. Write down general shared features of the text examples. This could be related to the full sentence or to the words surrounding the marked words.

3. Formulate a hypothesis and write down the final interpretation using [interpretation]:.)";
}

std::string explainer_fewshot_user(bool with_activations) {
  std::string out = "Example 1:  and he was <<over the moon>> to find";
  if (with_activations) out += "\n\nActivations: (\"over\", 5), (\" the\", 6), (\" moon\", 9)";
  out += "\n\nExample 2:  we'll be laughing <<till the cows come home>>! Pro";
  if (with_activations) {
    out += "\n\nActivations: (\"till\", 5), (\" the\", 5), (\" cows\", 8), (\" come\", 8), (\" home\", 8)";
  }
  out += "\n\nExample 3:  thought Scotland was boring, but really there's more <<than meets the eye>>! I'd";
  if (with_activations) out += "\n\nActivations: (\"than\", 5), (\" meets\", 7), (\" the\", 6), (\" eye\", 8)";
  return out;
}

std::string explainer_fewshot_assistant(bool cot) {
  std::string out;
  if (cot) {
    out = R"(ACTIVATING TOKENS: "over the moon", "than meets the eye".
SURROUNDING TOKENS: No interesting patterns.

Step 1.
- The activating tokens are all parts of common idioms.
- The surrounding tokens have nothing in common.

Step 2.
- The examples contain common idioms.
- In some examples, the activating tokens are followed by an exclamation mark.

Step 3.
- The activation values are the highest for the more common idioms in examples 1 and 3.

Let me think carefully. Did I miss any patterns in the text examples? Are there any more linguistic similarities?

- Yes, I missed one: The text examples all convey positive sentiment.

)";
  }
  out += "[interpretation]: Common idioms in text conveying positive sentiment.";
  return out;
}

std::string_view detection_system() {
  return R"(You are an intelligent and meticulous linguistics researcher.

You will be given a certain feature of text, such as "male pronouns" or "text with negative sentiment".

You will then be given several text examples. Your task is to determine which examples possess the feature.

For each example in turn, return 1 if the sentence is correctly labeled or 0 if the tokens are mislabeled. You must return your response in a valid Python list. Do not return anything else besides a Python list.)";
}

std::string_view detection_fewshot_user() {
  return R"(feature interpretation: Words related to American football positions, specifically the tight end position.

Text examples:

Example 0:Getty Images Patriots tight end Rob Gronkowski had his boss

Example 1: names of months used in The Lord of the Rings: the

Example 2: Media Day 2015 LSU defensive end Isaiah Washington (94) speaks to the

Example 3: shown, is generally not eligible for ads. For example, videos about recent tragedies,

Example 4: line, with the left side namely tackle Byron Bell at tackle and guard Amini)";
}

std::string_view detection_fewshot_assistant() { return "[1,0,0,0,1]"; }

std::string_view fuzzing_system() {
  return R"(You are an intelligent and meticulous linguistics researcher.

You will be given a certain feature of text, such as "male pronouns" or "text with negative sentiment". You will be given a few examples of text that contain this feature. Portions of the sentence which strongly represent this feature are between tokens << and >>.

Some examples might be mislabeled. Your task is to determine if every single token within << and >> is correctly labeled. Consider that all provided examples could be correct, none of the examples could be correct, or a mix. An example is only correct if every marked token is representative of the feature

For each example in turn, return 1 if the sentence is correctly labeled or 0 if the tokens are mislabeled. You must return your response in a valid Python list. Do not return anything else besides a Python list.)";
}

std::string_view fuzzing_fewshot_user() {
  return R"(feature interpretation: Words related to American football positions, specifically the tight end position.

Text examples:

Example 0:Getty Images Patriots<< tight end>> Rob Gronkowski had his boss

Example 1: posted You should know this<< about>> offensive line coaches: they are large, demanding<< men>>

Example 2: Media Day 2015 LSU<< defensive>> end Isaiah Washington (94) speaks<< to the>>

Example 3:<< running backs>>," he said. .. Defensive<< end>> Carroll Phillips is improving and his injury is

Example 4:<< line>>, with the left side namely<< tackle>> Byron Bell at<< tackle>> and<< guard>> Amini)";
}

std::string_view fuzzing_fewshot_assistant() { return "[1,0,0,1,1]"; }

std::string_view surprisal_fewshot() {
  return R"(The following is a description of a certain feature of text and a list of examples that contain the feature.

Description: 

References to the Antichrist, the Apocalypse and conspiracy theories related to those topics. 

Sentences: 

``by which he distinguishes Antichrist is, that he would rob God of his honour and take it to himself, he gives the leading feature which we ought"

``3 begins. And the rise of Antichrist. Get ready with"

`` would be destroyed. The worlds economy would likely collapse as a result and could usher in a one world government movement. I wrote a small 6 page"

Description: 

Sentences containing digits forming a four-digit year.

Sentences: 

`` 20, 2013 at 7:41 pm Martin Smith"

`` of 2012. In other words, Italy's"

``end 2012 levels). In the first quarter of 2013, we expect revenue to be up slightly from the fourth quarter"

Description: 

Text related to banking and financial institutions.

Sentences: 

``: He is on the Board of Directors with the Lumbee Bank"

`` refurbishing the Bank's branches. BIP reached 400 thousand users in one year The use of BIP has already doubled The"

`` the Federal Deposit Insurance Corp."

Description: 

Occurrences of the word 'The' at the beginning of sentence.

Sentences: 

``The Smoking Tire hits the canyons with one of the fastest Audi's on the road"

``The Chairman of the ABI"

``The administrative center is the town of Koch."

)";
}

std::string embedding_query(std::string_view interpretation) {
  std::string out = "Instruct: Retrieve sentences that could be related to the interpretation. Query: ";
  out += interpretation;
  return out;
}

std::string_view simulation_preamble() {
  return R"(We're studying neurons in a neural network. Each neuron looks for some particular thing in a short document. Look at an explanation of what the neuron does, and try to predict its activations on each token.

The activation format is token<tab>activation, activations go from 0 to 10, "unknown" indicates an unknown activation. Most activations will be 0.

Neuron: the word "moon" in idioms
Activations:
<start>
 over	0
 the	0
 moon	9
 and	0
 back	0
<end>

)";
}

std::string_view intervention_explainer_preamble() {
  return R"(We're studying neurons in a transformer model. We want to know how intervening on them affects the model's output.

For each neuron, we'll show you a few prompts where we intervened on that neuron at the final token position, and the tokens whose logits increased the most.

The tokens are shown in descending order of their probability increase, given in parentheses. Your job is to give a short summary of what outputs the neuron promotes.

Neuron 1
<PROMPT>Given 4x is less than 10,</PROMPT>
Most increased tokens: ' 4' (+0.11), ' 10' (+0.04), ' 40' (+0.02), ' 2' (+0.01)

<PROMPT>For some reason</PROMPT>
Most increased tokens: ' one' (+0.14), ' 1' (+0.01), ' fr' (+0.01)

<PROMPT>insurance does not cover claims for accounts with</PROMPT>
Most increased tokens: ' one' (+0.1), ' more' (+0.02), ' 10' (+0.01)

interpretation: numbers

)";
}

std::string_view intervention_scorer_fewshot() {
  return R"(<PASSAGE>
from west to east, the westmost of the seven wonders of the world is the great wall of china

The above passage contains an amplified amount of "Asia"

<PASSAGE>
Given 4x is less than 10, 4

The above passage contains an amplified amount of "numbers"

<PASSAGE>
In information theory, the information content, self-information, surprisal, or Shannon information is a basic quantity derived by her when she was a student at Windsor

The above passage contains an amplified amount of "she/her pronouns"

<PASSAGE>
My favorite food is oranges

The above passage contains an amplified amount of "fruits and vegetables"

)";
}

}  // namespace autointerp::prompts
