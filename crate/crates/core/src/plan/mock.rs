//! Deterministic stand-in for the language-model planner.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    BoundingBox, FramePlan, PlanError, StoryPrompt, StoryboardPlan, SubjectId, SubjectLayout,
};
use crate::rng;

/// (id, canonical description)
const CAST: [(&str, &str); 16] = [
    ("dog", "a golden retriever with a red collar"),
    ("duck", "a yellow duck with an orange beak"),
    ("cat", "a black and white tuxedo cat"),
    ("rabbit", "a small grey rabbit with long ears"),
    ("fox", "a red fox with a bushy white-tipped tail"),
    ("owl", "a brown owl with round amber eyes"),
    ("boy", "a young boy in a blue raincoat"),
    ("girl", "a girl with braided hair and a green dress"),
    ("bear", "a brown teddy bear with a bow tie"),
    ("robot", "a small silver robot with a round head"),
    ("turtle", "a green sea turtle"),
    ("horse", "a chestnut horse with a white blaze"),
    ("parrot", "a scarlet macaw parrot"),
    ("panda", "a giant panda cub"),
    ("penguin", "an emperor penguin chick"),
    ("squirrel", "a red squirrel holding an acorn"),
];

const ACTIONS: [&str; 8] = [
    "running",
    "sitting",
    "jumping",
    "sleeping",
    "playing",
    "eating",
    "looking up",
    "waving",
];

const SETTINGS: [&str; 8] = [
    "on a sunny beach",
    "in a misty forest",
    "in a city park",
    "in a cosy kitchen",
    "on a snowy hill",
    "on a busy street",
    "in a flower meadow",
    "in an old library",
];

/// Largest subject count the mock can cast: one distinct character per
/// subject, drawn from a fixed cast.
pub const MAX_MOCK_SUBJECTS: usize = CAST.len();

const MOCK_STREAM: u64 = 0x6d6f_636b;

/// Deterministic plan with `subject_count` subjects tiled left to right in
/// every frame: subject `k` of `K` gets the box `[k/K, 0, (k+1)/K, 1]`.
///
/// Characters named in the prompt text are cast first; the seed picks the
/// remaining cast, the per-frame settings and the per-subject actions. Box
/// geometry does not depend on the seed.
pub fn mock_plan(
    prompt: &StoryPrompt,
    subject_count: usize,
    seed: u64,
) -> Result<StoryboardPlan, PlanError> {
    prompt.validate()?;
    if subject_count == 0 {
        return Err(PlanError::invalid("subject_count: must be at least 1"));
    }
    if subject_count > MAX_MOCK_SUBJECTS {
        return Err(PlanError::Capacity {
            requested: subject_count,
            max: MAX_MOCK_SUBJECTS,
        });
    }

    let mut rng = rng::stream(&[MOCK_STREAM, seed, rng::fnv1a(prompt.text.as_bytes())]);

    let lowered = prompt.text.to_lowercase();
    let words: Vec<&str> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let (mut cast, mut rest): (Vec<usize>, Vec<usize>) =
        (0..CAST.len()).partition(|&i| words.contains(&CAST[i].0));
    rest.shuffle(&mut rng);
    cast.extend(rest);
    cast.truncate(subject_count);

    let subjects: BTreeMap<SubjectId, String> = cast
        .iter()
        .map(|&i| (SubjectId::from(CAST[i].0), CAST[i].1.to_owned()))
        .collect();

    let k_total = subject_count as f64;
    let frames = (0..prompt.frame_count)
        .map(|f| {
            let setting = SETTINGS[rng.random_range(0..SETTINGS.len())];
            let layouts: Vec<SubjectLayout> = cast
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let action = ACTIONS[rng.random_range(0..ACTIONS.len())];
                    SubjectLayout {
                        subject_id: SubjectId::from(CAST[i].0),
                        local_prompt: format!("{}, {action}", CAST[i].1),
                        bbox: BoundingBox {
                            x0: k as f64 / k_total,
                            y0: 0.0,
                            x1: (k + 1) as f64 / k_total,
                            y1: 1.0,
                        },
                    }
                })
                .collect();
            let names: Vec<&str> = cast.iter().map(|&i| CAST[i].0).collect();
            FramePlan {
                index: f + 1,
                global_prompt: format!(
                    "{}. Frame {} of {}: the {} {setting}",
                    prompt.text.trim(),
                    f + 1,
                    prompt.frame_count,
                    names.join(" and the ")
                ),
                layouts,
            }
        })
        .collect();

    let plan = StoryboardPlan {
        prompt: prompt.clone(),
        subjects,
        frames,
    };
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{parse_plan, serialize_plan};

    fn prompt(b: usize) -> StoryPrompt {
        StoryPrompt::new("a dog and a duck on a beach", b).unwrap()
    }

    #[test]
    fn two_subjects_split_the_frame() {
        let plan = mock_plan(&prompt(2), 2, 7).unwrap();
        assert_eq!(plan.frames.len(), 2);
        let boxes: Vec<BoundingBox> = plan.frames[0].layouts.iter().map(|l| l.bbox).collect();
        assert_eq!(boxes[0], BoundingBox::new(0.0, 0.0, 0.5, 1.0).unwrap());
        assert_eq!(boxes[1], BoundingBox::new(0.5, 0.0, 1.0, 1.0).unwrap());
        // Characters named in the prompt are cast first.
        let ids: Vec<&str> = plan.subject_ids().map(SubjectId::as_str).collect();
        assert_eq!(ids, ["dog", "duck"]);
    }

    #[test]
    fn deterministic_in_all_inputs() {
        let a = serialize_plan(&mock_plan(&prompt(2), 2, 7).unwrap());
        let b = serialize_plan(&mock_plan(&prompt(2), 2, 7).unwrap());
        assert_eq!(a, b);
        let c = serialize_plan(&mock_plan(&prompt(2), 3, 7).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_single_frame_single_subject() {
        let plan = mock_plan(&prompt(1), 1, 0).unwrap();
        assert_eq!(plan.frames.len(), 1);
        assert_eq!(plan.frames[0].layouts.len(), 1);
        assert_eq!(plan.frames[0].layouts[0].bbox, BoundingBox::full());
    }

    #[test]
    fn capacity_and_zero_subjects() {
        assert!(matches!(
            mock_plan(&prompt(1), MAX_MOCK_SUBJECTS + 1, 0),
            Err(PlanError::Capacity {
                requested: 17,
                max: 16
            })
        ));
        assert!(mock_plan(&prompt(1), MAX_MOCK_SUBJECTS, 0).is_ok());
        assert!(matches!(
            mock_plan(&prompt(1), 0, 0),
            Err(PlanError::Validation { .. })
        ));
    }

    #[test]
    fn boxes_never_overlap() {
        for k in 1..=MAX_MOCK_SUBJECTS {
            let plan = mock_plan(&prompt(3), k, k as u64).unwrap();
            for frame in &plan.frames {
                for (a, la) in frame.layouts.iter().enumerate() {
                    for lb in &frame.layouts[a + 1..] {
                        assert_eq!(la.bbox.intersection_area(&lb.bbox), 0.0);
                    }
                }
            }
            assert_eq!(parse_plan(&serialize_plan(&plan)).unwrap(), plan);
        }
    }
}
