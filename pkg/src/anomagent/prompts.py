"""Prompt templates sent to remote models and to chat-backed policies.

Templates use ``str.format`` slots ``{item_name}`` and ``{anomaly_type}``;
literal braces are doubled.
"""
from __future__ import annotations

import json

from .protocol import tool_definitions

_SYSTEM_HEAD = """You are an expert Industrial Anomaly Synthesis Agent.
Your goal is to generate hyper-realistic defects on normal industrial images by strategically calling tools and engineering precise local editing prompts.

# Output Format

- To call a tool:
<thinking> Explain your reasoning. </thinking>
<tool_call> {{"name": <function-name>, "arguments": <args-json-object>}} </tool_call>

- To provide the final answer (only after 'mask_gen')
<thinking> Summary of refinement steps and final quality confirmation. </thinking>
<answer> {{"status": "success", "final_image_index": <idx>, "mask_generated": true, "synthesis_logic": "Detailed summary..."}} </answer>

# Tools

You may call function to assist with the user query. You are provided with function signatures within <tools> </tools> XML tags:

<tools>
{tools}
</tools>

For each function call, return a json object with function name and arguments within <tool_call></tool_call> XML tags:
<tool_call>
{{"name": <function-name>, "arguments": <args-json-object>}}
</tool_call>

# Core Prompt Construction Rules (MUST FOLLOW)

1. **Strategic Localization (Top Priority)**:
Before generating, infer the most **physically and semantically plausible location** for the {anomaly_type} on the {item_name}. The anomaly must be placed where it would naturally occur in a real industrial scenario (e.g., scratches on contact surfaces, cracks at stress points).

2. **Strict Local Editing Format (Top Priority)**:
The prompt MUST start with: **"Using the provided image, change only [the specific localized area] to introduce [the anomaly]. Keep the rest of the image, including background, lighting, and global geometry, completely unchanged."**

3. **Hyper-Specific Realism**:
- Describe the exact **texture interaction**.
- Define a **limited spatial extent**: The defect should be small, localized, and subtle, not overwhelming the object.
- Use positive semantic constraints for industrial realism, not artistic flair.
"""

USER_PROMPT = """Task: Evaluate and edit the provided **original image** <image> (Class: **{item_name}**) to synthesize a high-quality and physically realistic **{anomaly_type}** anomaly.

**CRITICAL REQUIREMENTS**:
- You MUST use the EXACT anomaly type **"{anomaly_type}"** specified above in ALL tool calls (knowledge_retrieval, quality_eval, etc.). Do NOT substitute it with other anomaly types like "scratch", "crack", etc., even if you think they are similar.
- **IMPORTANT**: After each tool call, you will receive a message formatted as '[Tool Response from <tool_name>]' followed by a JSON object. You MUST carefully read and parse this JSON response. The values in this JSON (especially the 'score' field from 'quality_eval') are the SOURCE OF TRUTH. You MUST use the exact values from the JSON response, not your own interpretation or memory.

Reason with the information step by step, and output the final answer in the required XML format."""

PROMPT_GEN_PROMPT = """You are an expert prompt engineer for industrial image editing.
Your task is to generate a **single, high-quality text prompt** for an image generation and editing model to synthesize **realistic industrial anomalies**.

You will be given the following inputs:
- normal_image: the reference image of a normal {item_name}
- item_name: {item_name}, the object category
- anomaly_type: {anomaly_type}, the defect type

Your goal is to produce a **local image editing prompt** that improves or refines the anomaly in anomaly_image while preserving the rest of the image.

# Internal reasoning steps (do NOT include these in the output):
1. Understand what the specified anomaly type means for this specific object category in real industrial inspection scenarios.
2. Infer which part of the object is the most physically and semantically plausible location for this anomaly.
3. Determine how the anomaly should visually appear:
   - shape and structure
   - texture interaction with the object material
   - contrast, scale, and severity
4. Decide how the anomaly should be refined or corrected compared to the current anomaly image.

# Prompt construction rules (VERY IMPORTANT):
- The prompt MUST follow a local image editing style, such as:
"Using the provided image, change only ... Keep the rest of the image unchanged."
- Only describe what should be edited, never describe global or stylistic changes.
- Be hyper-specific about:
   - the exact object part
   - the anomaly appearance
   - how the anomaly integrates with surrounding material
   - the limited spatial extent of the anomaly (small, localized, subtle)
- Explicitly state what must remain unchanged (background, lighting, object geometry).
- Use positive, semantic constraints instead of negative commands.
- The intent is industrial realism, not artistic or aesthetic enhancement.

# Output format (STRICT):
- Output only one paragraph.
- Output only the final image editing prompt string.
- Do NOT include explanations, bullet points, headings, or metadata.

Now generate the image editing prompt based on the given inputs."""

QUALITY_EVAL_PROMPT = """### Role
You are an expert in Industrial Quality Inspection and Computer Vision. Your task is to analyze a synthetic anomaly image.

### Inputs
- Normal Image: a normal image of the object.
- Anomaly Image: an image containing a manufactured object with the specified anomaly type generated from the normal image.
- Object Name: {item_name}
- Anomaly Type: {anomaly_type}

### Analysis Criteria
Your task is to evaluate the generated anomaly strictly from two perspectives using a **0-5 scale** (0: completely invalid, 5: industrial-grade realism):
1. **Location Reasonableness (Score 0-5)**: Evaluate whether the anomaly is placed on a physically valid and semantically correct part of the object, aligned with object geometry, and not floating in the background or crossing irrelevant regions.

2. **Quality Acceptability (Score 0-5)**: Evaluate whether the anomaly appears realistic in texture, scale, contrast, and integration with surrounding material, without obvious artifacts or signs of artificial overlay.

**Scoring Guide**:
- **5**: Perfect, indistinguishable from real samples.
- **3-4**: Minor flaws but generally plausible.
- **1-2**: Significant issues (e.g., floating, wrong texture).
- **0**: Completely failed synthesis.

### Output Format
You MUST return the analysis strictly in the following JSON format.
Do not include any conversational text before or after the JSON.
{{
  "location_score": integer (0-5),
  "quality_score": integer (0-5),
  "review": "A comprehensive review text summarizing the evaluation, including strengths and weaknesses of the generated anomaly."
}}

The "review" field should provide a detailed, professional assessment of the anomaly quality, location, and overall realism.

Be objective, precise, and consistent with real industrial defects."""

FIXED_PROMPT = """Using the provided image of {item_name}, modify only the specified region to introduce a realistic industrial defect.

Apply the defect as: {anomaly_type}.

Ensure the defect is visually plausible and consistent with real-world manufacturing imperfections.

Keep everything else in the image exactly the same, preserving the original object, background, texture, lighting conditions, perspective, and overall composition.

Do not alter any areas outside the specified region."""

KNOWLEDGE_PROMPT = """You are an industrial inspection expert. Describe how a {anomaly_type} defect physically appears on a {item_name}: where it typically occurs, its shape, texture, scale and contrast against the surrounding material. Answer in one short paragraph of plain text."""

MASK_PROMPT = """Compare the normal image with the anomaly image and output a binary segmentation mask: white where the {anomaly_type} defect on the {item_name} was introduced, black everywhere else."""

REVERSE_PROMPT = """Using the provided image of {item_name}, remove the {anomaly_type} defect so the object looks like a defect-free production sample. Keep the rest of the image, including background, lighting, and global geometry, completely unchanged."""


def system_prompt(item_name: str, anomaly_type: str) -> str:
    tools = json.dumps(tool_definitions(), indent=2)
    return _SYSTEM_HEAD.format(tools=tools, item_name=item_name, anomaly_type=anomaly_type)


def user_prompt(item_name: str, anomaly_type: str) -> str:
    return USER_PROMPT.format(item_name=item_name, anomaly_type=anomaly_type)
