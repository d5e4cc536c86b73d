"""Chain-of-thought prompt templates for category descriptions.

Four registered families, each an ordered list of titled prompts that
ask a language model to describe one material category from several
angles. Bodies may contain a ``{subject}`` slot; rendering substitutes
the category name there. Prompts whose wording already speaks of "this
category" carry no slot and render unchanged, with the subject riding
along as metadata.
"""

import dataclasses

from .errors import ConfigError


@dataclasses.dataclass(frozen=True)
class Prompt:
    index: int
    title: str
    body: str

    @property
    def text(self):
        return f"{self.title}: {self.body}"


@dataclasses.dataclass(frozen=True)
class PromptTemplate:
    family: str
    prompts: tuple

    def __len__(self):
        return len(self.prompts)


def _template(family, entries):
    return PromptTemplate(family=family, prompts=tuple(
        Prompt(index=i + 1, title=title, body=body)
        for i, (title, body) in enumerate(entries)))


_REGISTRY = {
    "nanomaterial": _template("nanomaterial", [
        ("Introduction",
         "Provide an overview of the {subject} and its significance across "
         "various fields."),
        ("Definition and Structure",
         "Define the {subject} and describe its typical structure at the "
         "nanoscale."),
        ("Synthesis Methods",
         "Examine different methods employed for synthesizing or fabricating "
         "nanomaterials within this category. Discuss both their advantages "
         "and limitations."),
        ("Properties",
         "Highlight the unique physical, chemical, and electronic properties "
         "exhibited by nanomaterials in this category. Explain how these "
         "properties differ from those of bulk materials."),
        ("Surface Modification",
         "Describe strategies used to modify the surface properties of "
         "nanomaterials in this category, including techniques like "
         "functionalization, coating, or doping. Explain how these "
         "modifications enhance their performance or enable specific "
         "applications."),
        ("Applications",
         "Explore the extensive range of applications wherein nanomaterials "
         "from this category find use. Discuss their potential impact on "
         "fields such as electronics, energy, medicine, and more."),
    ]),
    "surface-defect": _template("surface-defect", [
        ("Overview",
         "Briefly describe the {subject} and its impact on material "
         "performance."),
        ("Characteristics", "Define the defect and its identifying features."),
        ("Formation", "Discuss the formation mechanisms of the defect."),
        ("Detection", "List the primary techniques for defect detection."),
        ("Effects", "Explain the defect's effects on material properties."),
        ("Mitigation", "Outline strategies to mitigate the defect."),
        ("Engineering",
         "Describe surface engineering techniques to control the defect."),
        ("Case Studies",
         "Provide examples where defect management improved material use."),
    ]),
    "corrosion": _template("corrosion", [
        ("Corrosion Grading Overview",
         "Summarize the numerical corrosion grade system."),
        ("Grade Characteristics",
         "Detail key features of each corrosion grade."),
        ("Influencing Factors",
         "Discuss factors that influence corrosion grading."),
        ("Deterioration Mechanisms",
         "Describe deterioration mechanisms by grade."),
        ("Property Impact",
         "Examine corrosion's impact on metal properties."),
        ("Mitigation Strategies",
         "Outline preventive measures for each grade."),
        ("Grade Progression Analysis",
         "Analyze corrosion grade progression over time."),
        ("Rehabilitation Approaches",
         "Guide on repair or replace decisions by grade."),
        ("Corrosion Management Case Studies",
         "Present case studies on corrosion management."),
        ("Economic and Safety Considerations",
         "Discuss economic and safety implications."),
    ]),
    "general-material": _template("general-material", [
        ("Contextual Overview",
         "Introduce the {subject}'s origin, common use, and relevance."),
        ("Properties",
         "Discuss the {subject}'s physical and chemical characteristics."),
        ("Production",
         "Outline the processes of material preparation or manufacturing."),
        ("Structure",
         "Examine the {subject}'s structural features and their implications."),
        ("Modification",
         "Describe possible modifications to enhance the {subject}'s "
         "properties."),
        ("Longevity",
         "Analyze the {subject}'s durability, degradation, and environmental "
         "impact."),
        ("Applications",
         "Explore diverse applications and uses of the {subject}."),
        ("Economic Impact",
         "Reflect on the {subject}'s economic significance and societal "
         "influence."),
        ("Safety",
         "Address health and safety considerations related to the {subject}."),
        ("Future Outlook",
         "Speculate on potential future developments and research directions."),
    ]),
}

FAMILY_SIZES = {name: len(t) for name, t in _REGISTRY.items()}


def families():
    """Registered family names, sorted."""
    return sorted(_REGISTRY)


def get_template(family):
    try:
        return _REGISTRY[family]
    except KeyError:
        raise ConfigError(
            f"unknown prompt family {family!r}; registered: {families()}") from None


def build_cot_prompts(family, subject):
    """Render a family's prompts for one subject, in template order."""
    template = get_template(family)
    return [Prompt(index=p.index, title=p.title,
                   body=p.body.replace("{subject}", subject))
            for p in template.prompts]
