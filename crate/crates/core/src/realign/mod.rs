//! Concept intervention realignment: a learned map that updates the
//! un-intervened concepts after every intervention.

mod joint;
mod net;
mod posthoc;
mod saved;

pub use joint::{
    conc_rea_loss, conc_rea_loss_on, intcem_rea_loss, intcem_rea_loss_on, train_intcem_rea, ReaLossVars, TapeRealigner,
    UnitChooser,
};
pub use net::{
    crm_forward, realign_masked, realigner_input, ConceptRealigner, IdentityRealigner, InputMode, RealignState,
    Realigner, RealignerArch, RealignerConfig, RealignerNet, TapeState,
};
pub use posthoc::{posthoc_trajectory_loss, train_realigner_grid, train_realigner_posthoc, GridPoint};
pub use saved::{load_realigner, save_realigner, SavedRealigner, REALIGNER_FORMAT, REALIGNER_VERSION};

use serde::{Deserialize, Serialize};

use crate::intervene::PolicyKind;

/// A realigner paired with the policy that reads its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cirm {
    pub realigner: Realigner,
    pub policy: PolicyKind,
}

impl Cirm {
    pub fn new(realigner: Realigner) -> Self {
        Self {
            realigner,
            policy: PolicyKind::ucp(),
        }
    }
}
