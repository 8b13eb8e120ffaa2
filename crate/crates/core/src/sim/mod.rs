//! Seeded simulators for the two desk-scale reasoning worlds (shell-game
//! occlusion tracking and blicket causal induction), their exact symbolic
//! label oracles, the shared rasterizer, compositional attribute splits,
//! and the on-disk dataset format.

pub mod blicket;
pub mod dataset;
pub mod render;
pub mod shell;
pub mod split;

pub use blicket::{
    gen_blicket, label_oracle, verify_blicket, BlicketConfig, BlicketEpisode, Label3, QuestionType,
};
pub use dataset::{read_dataset, write_dataset, Dataset, Episode, QT_SHELL};
pub use render::{Frame, Platform};
pub use shell::{
    gen_shell_game, replay_label, replay_states, ShellConfig, ShellEvent, ShellGameEpisode,
    ShellObject, ShellState,
};
pub use split::{build_compositional_split, CompositionalSplit};

impl ShellGameEpisode {
    pub fn to_episode(&self) -> Episode {
        let h = self.frames[0].h as u16;
        let w = self.frames[0].w as u16;
        Episode {
            label: self.label,
            question_type: QT_SHELL,
            h,
            w,
            frames: self.frames.iter().map(|f| f.rgb.clone()).collect(),
            trace: self.trace_text(),
        }
    }
}

impl BlicketEpisode {
    pub fn to_episode(&self) -> Episode {
        let h = self.frames[0].h as u16;
        let w = self.frames[0].w as u16;
        Episode {
            label: self.label.index(),
            question_type: self.question_type.index(),
            h,
            w,
            frames: self.frames.iter().map(|f| f.rgb.clone()).collect(),
            trace: self.trace_text(),
        }
    }
}
