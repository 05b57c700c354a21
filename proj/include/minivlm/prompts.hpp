// SPDX-License-Identifier: Apache-2.0
//
// Prompt templates for the temporal-grounding data pipeline. These are
// golden artifacts: rendered prompts must be byte-identical to these
// templates after substituting `{images_caption}`, and the tests enforce
// that, so any edit here is a breaking format change.

#pragma once

namespace minivlm {

inline constexpr const char* kCaptionPrompt =
    "Give out the detailed description of this image.";

inline constexpr const char* kSceneFilterTemplate =
    R"PROMPT(We extracted several frames from this video and described each frame using an image caption model, stored in the dictionary variable `image_captions: Dict[str:str]`. In `image_captions`, the key is the second at which the image appears in the video, and the value is a detailed description of the image at that moment. Our image captions may contain hallucinations and errors. If you find any information that seems incorrect, please ignore the erroneous information. image_captions={images_caption}
Please determine whether there are significant scene changes in each second of the video based on the frame descriptions. If there are significant changes, output "Yes"; otherwise, output "No".For example, if the description continuously mentions a pool scene or a kitchen scene, then return "No". If the description first mentions an indoor scene and then a beach scene, then return "Yes". Output your final answers directly. Do not give out your reason.)PROMPT";

inline constexpr const char* kQaTemplate =
    R"PROMPT(We extracted several frames from this video and described each frame using an image caption model, stored in the dictionary variable `image_captions: Dict[str:str]`. In `image_captions`, the key is the second at which the image appears in the video, and the value is a detailed description of the image at that moment. You will play two roles: a human asking a question related to the biggest change in the video and an intelligent chatbot designed for video understanding.Your question and answer should be based on the information provided by `image_captions`.
image_captions={images_caption}
Please generate the response in the form of a Python dictionary string with keys "Human" for question and "Bot" for answer. Each corresponding value should be the question and answer text respectively. For example, your response should look like this: {"Human": "Your question here...", "Bot": "Your answer here..."}. Do not mention variables like `image_captions` in your response. Always generate the question and the answer as if you are directly looking at the video.The questions you generate should focus on the biggest scene change. Do not generate questions that can be easily answered from a single image. Here are some examples of what we expect:
Example 1: {"Human": "At what second does the girl appear?", "Bot": "The girl appears at the 3rd second in the video."}
Example 2: {"Human": "When does the video switch from the swimming pool to the grass?", "Bot": "At the 3rd second."}
Example 3: {"Human": "When does a significant scene change occur in the video? ", "Bot": "At the 10th second, the scene changes from the playground to the classroom."}
If you think it is not possible to generate such questions and answers from the given image captions, output "None" directly. Keep your answers concise and accurate and generate only one question and answer pair. )PROMPT";

inline constexpr const char* kImagesCaptionSlot = "{images_caption}";

}  // namespace minivlm
