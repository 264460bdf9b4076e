//! Task specifications and the closed instruction vocabulary.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

pub const N_COLORS: usize = 4;
pub const N_SHAPES: usize = 2;
pub const MAX_INSTRUCTION_LEN: usize = 16;

pub const COLOR_NAMES: [&str; N_COLORS] = ["red", "green", "blue", "yellow"];

/// Instruction vocabulary. Id 0 is padding and never produced by the parser.
pub const VOCAB: [&str; 12] = [
    "<pad>", "place", "stack", "then", "on", "in", "bin", "base", "red", "green", "blue", "yellow",
];

pub const PAD_TOKEN: i32 = 0;

pub fn token_id(word: &str) -> Result<i32> {
    VOCAB[1..]
        .iter()
        .position(|w| *w == word)
        .map(|i| i as i32 + 1)
        .ok_or_else(|| Error::UnknownToken(word.to_string()))
}

pub fn token_word(id: i32) -> Result<&'static str> {
    usize::try_from(id)
        .ok()
        .filter(|&i| i > 0 && i < VOCAB.len())
        .map(|i| VOCAB[i])
        .ok_or_else(|| Error::UnknownToken(format!("#{id}")))
}

fn color_token(color: usize) -> i32 {
    token_id(COLOR_NAMES[color]).expect("color words are in the vocabulary")
}

fn color_of_token(id: i32) -> Option<usize> {
    let w = token_word(id).ok()?;
    COLOR_NAMES.iter().position(|c| *c == w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskFamily {
    PickPlace,
    Stack,
}

/// The four task columns: single/multi pick-and-place and stacking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Pp1,
    PpN,
    Stack1,
    StackN,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Pp1, TaskKind::PpN, TaskKind::Stack1, TaskKind::StackN];

    pub fn family(self) -> TaskFamily {
        match self {
            TaskKind::Pp1 | TaskKind::PpN => TaskFamily::PickPlace,
            TaskKind::Stack1 | TaskKind::StackN => TaskFamily::Stack,
        }
    }

    pub fn n_targets(self) -> usize {
        match self {
            TaskKind::Pp1 | TaskKind::Stack1 => 1,
            TaskKind::PpN | TaskKind::StackN => 2,
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pp1" => Ok(TaskKind::Pp1),
            "ppN" | "ppn" => Ok(TaskKind::PpN),
            "stack1" => Ok(TaskKind::Stack1),
            "stackN" | "stackn" => Ok(TaskKind::StackN),
            _ => Err(Error::Config(format!(
                "unknown task {s:?} (expected pp1, ppN, stack1 or stackN)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Pp1 => "pp1",
            TaskKind::PpN => "ppN",
            TaskKind::Stack1 => "stack1",
            TaskKind::StackN => "stackN",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObjectKind {
    pub color_id: usize,
    pub shape_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub family: TaskFamily,
    /// Identity of every object in the scene, by index.
    pub objects: Vec<ObjectKind>,
    /// Object indices to deliver, in order.
    pub targets: Vec<usize>,
    /// Bin centre for pick-and-place, stack base for stacking.
    pub goal_pos: [f64; 2],
    pub horizon: usize,
    /// Colour of the stack base, drawn at `goal_pos`.
    pub base_color: Option<usize>,
    /// `(top, hidden)`: object `hidden` starts underneath object `top`
    /// with the same appearance.
    pub twin: Option<(usize, usize)>,
    /// Steps the arm is immobile after reset and after every correct placement.
    pub settle_steps: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("task has no targets".into()));
        }
        let mut seen = vec![false; self.objects.len()];
        for &t in &self.targets {
            if t >= self.objects.len() {
                return Err(Error::Config(format!("target index {t} out of range")));
            }
            if std::mem::replace(&mut seen[t], true) {
                return Err(Error::Config(format!("duplicate target index {t}")));
            }
        }
        for o in &self.objects {
            if o.color_id >= N_COLORS || o.shape_id >= N_SHAPES {
                return Err(Error::Config("object identity out of range".into()));
            }
        }
        if let Some((top, hidden)) = self.twin {
            if top >= self.objects.len() || hidden >= self.objects.len() || top >= hidden {
                return Err(Error::Config("twin must reference a later object index".into()));
            }
            if self.objects[top] != self.objects[hidden] {
                return Err(Error::Config("twin objects must look identical".into()));
            }
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(())
    }

    /// Sample a task of the given kind. Target colours are distinct and
    /// drawn at random; `aliased` adds a hidden twin under the first target.
    pub fn generate<R: Rng>(
        kind: TaskKind,
        aliased: bool,
        distractors: usize,
        horizon: usize,
        settle_steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let family = kind.family();
        let n_targets = kind.n_targets();
        let needed = n_targets + distractors + usize::from(family == TaskFamily::Stack);
        if needed > N_COLORS {
            return Err(Error::Config(format!(
                "{kind} with {distractors} distractors needs {needed} colours, only {N_COLORS} exist"
            )));
        }
        let mut colors: Vec<usize> = (0..N_COLORS).collect();
        for i in 0..colors.len() {
            let j = rng.random_range(i..colors.len());
            colors.swap(i, j);
        }
        let mut objects: Vec<ObjectKind> = colors[..n_targets + distractors]
            .iter()
            .map(|&c| ObjectKind {
                color_id: c,
                shape_id: rng.random_range(0..N_SHAPES),
            })
            .collect();
        let base_color = (family == TaskFamily::Stack).then(|| colors[n_targets + distractors]);
        let goal_pos = match family {
            TaskFamily::PickPlace => [0.5, 0.5],
            TaskFamily::Stack => loop {
                let g = [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
                if ((g[0] - 0.5f64).powi(2) + (g[1] - 0.5f64).powi(2)).sqrt() >= 0.15 {
                    break g;
                }
            },
        };
        let twin = aliased.then(|| {
            objects.push(objects[0]);
            (0, objects.len() - 1)
        });
        let spec = Self {
            family,
            objects,
            targets: (0..n_targets).collect(),
            goal_pos,
            horizon,
            base_color,
            twin,
            settle_steps,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Token ids of the natural-language instruction for this task.
    pub fn instruction(&self) -> Vec<i32> {
        let mut toks = vec![token_id(match self.family {
            TaskFamily::PickPlace => "place",
            TaskFamily::Stack => "stack",
        })
        .unwrap()];
        for (i, &t) in self.targets.iter().enumerate() {
            if i > 0 {
                toks.push(token_id("then").unwrap());
            }
            toks.push(color_token(self.objects[t].color_id));
        }
        if let Some(b) = self.base_color {
            toks.push(token_id("on").unwrap());
            toks.push(color_token(b));
        }
        toks
    }

    pub fn instruction_text(&self) -> String {
        self.instruction()
            .iter()
            .map(|&t| token_word(t).unwrap())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Parsed instruction: `place <color> [then <color> ...] [in bin]` or
/// `stack <color> [then <color> ...] on <color>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub tokens: Vec<i32>,
    pub family: TaskFamily,
    pub target_colors: Vec<usize>,
    pub base_color: Option<usize>,
}

impl Instruction {
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = text
            .split_whitespace()
            .map(|w| token_id(&w.to_ascii_lowercase()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<i32>) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("malformed instruction: {m}"));
        if tokens.len() > MAX_INSTRUCTION_LEN {
            return Err(bad("longer than 16 tokens"));
        }
        let words: Vec<&str> = tokens.iter().map(|&t| token_word(t)).collect::<Result<_>>()?;
        let family = match words.first() {
            Some(&"place") => TaskFamily::PickPlace,
            Some(&"stack") => TaskFamily::Stack,
            _ => return Err(bad("must start with `place` or `stack`")),
        };
        let mut target_colors = Vec::new();
        let mut i = 1;
        loop {
            let c = tokens
                .get(i)
                .and_then(|&t| color_of_token(t))
                .ok_or_else(|| bad("expected a colour"))?;
            if target_colors.contains(&c) {
                return Err(bad("colour repeated"));
            }
            target_colors.push(c);
            i += 1;
            if words.get(i) == Some(&"then") {
                i += 1;
            } else {
                break;
            }
        }
        let mut base_color = None;
        match (family, &words[i..]) {
            (TaskFamily::PickPlace, []) | (TaskFamily::PickPlace, ["in", "bin"]) => {}
            (TaskFamily::Stack, ["on", _]) => {
                let c = color_of_token(tokens[i + 1]).ok_or_else(|| bad("expected base colour"))?;
                if target_colors.contains(&c) {
                    return Err(bad("base colour is also a target"));
                }
                base_color = Some(c);
            }
            _ => return Err(bad("unexpected trailing words")),
        }
        Ok(Self {
            tokens,
            family,
            target_colors,
            base_color,
        })
    }

    /// Build a task with these target colours; shapes are fixed to solid
    /// squares and the goal is sampled as for [`TaskSpec::generate`].
    pub fn to_task<R: Rng>(
        &self,
        aliased: bool,
        horizon: usize,
        settle_steps: usize,
        rng: &mut R,
    ) -> Result<TaskSpec> {
        let mut objects: Vec<ObjectKind> = self
            .target_colors
            .iter()
            .map(|&c| ObjectKind {
                color_id: c,
                shape_id: 0,
            })
            .collect();
        let goal_pos = match self.family {
            TaskFamily::PickPlace => [0.5, 0.5],
            TaskFamily::Stack => loop {
                let g = [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
                if ((g[0] - 0.5f64).powi(2) + (g[1] - 0.5f64).powi(2)).sqrt() >= 0.15 {
                    break g;
                }
            },
        };
        let twin = aliased.then(|| {
            objects.push(objects[0]);
            (0, objects.len() - 1)
        });
        let spec = TaskSpec {
            family: self.family,
            targets: (0..self.target_colors.len()).collect(),
            objects,
            goal_pos,
            horizon,
            base_color: self.base_color,
            twin,
            settle_steps,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_instruction_parses_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in TaskKind::ALL {
            for aliased in [false, true] {
                let t = TaskSpec::generate(kind, aliased, 0, 200, 12, &mut rng).unwrap();
                let ins = Instruction::parse(&t.instruction_text()).unwrap();
                assert_eq!(ins.tokens, t.instruction());
                assert_eq!(ins.target_colors.len(), kind.n_targets());
                let colors: Vec<usize> = t.targets.iter().map(|&i| t.objects[i].color_id).collect();
                assert_eq!(ins.target_colors, colors);
            }
        }
    }

    #[test]
    fn parser_rejects_unknown_and_malformed() {
        assert!(matches!(Instruction::parse("place purple"), Err(Error::UnknownToken(_))));
        assert!(Instruction::parse("place").is_err());
        assert!(Instruction::parse("place red then").is_err());
        assert!(Instruction::parse("stack red").is_err());
        assert!(Instruction::parse("stack red on red").is_err());
        assert!(Instruction::parse("place red in bin").is_ok());
        let s = Instruction::parse("stack red then blue on green").unwrap();
        assert_eq!(s.base_color, Some(1));
    }

    #[test]
    fn aliased_variant_has_identical_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = TaskSpec::generate(TaskKind::PpN, true, 0, 200, 12, &mut rng).unwrap();
        let (a, b) = t.twin.unwrap();
        assert_eq!(t.objects[a], t.objects[b]);
        assert!(!t.targets.contains(&b));
    }

    #[test]
    fn validate_catches_bad_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = TaskSpec::generate(TaskKind::PpN, false, 0, 200, 12, &mut rng).unwrap();
        t.targets = vec![0, 0];
        assert!(t.validate().is_err());
        t.targets = vec![];
        assert!(t.validate().is_err());
        t.targets = vec![7];
        assert!(t.validate().is_err());
    }
}
