//! TOML documents read and written by the command-line tool.
//!
//! A config document may carry a `[profile]` table (a [`DeviceProfile`]), a
//! `[layout]` table (a [`FirmwareLayout`]) and a `[plan]` table. Addresses and
//! sizes are written as `0x`-prefixed hex strings; plain integers are accepted
//! on input.
//!
//! A plan is stored as its summary fields plus the boot-time register writes
//! (`[[plan.boot]]`). Loading a plan replays those writes through
//! [`apply_boot_sequence`], so the MPU and DWT state the simulator sees is
//! exactly what the listed writes would program.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::AddrRange;
use crate::dwt::Arch;
use crate::mpu::Mode;
use crate::planner::{
    apply_boot_sequence, emit_boot_sequence, BootError, DeviceProfile, FirmwareLayout, PlanInvariantError, PlanOption,
    ProtectionPlan, RegisterWrite,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{}parse error: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
    #[error("missing [{0}] section")]
    MissingSection(&'static str),
    #[error("boot sequence: {0}")]
    Boot(#[from] BootError),
    #[error("plan invariant: {0}")]
    Invariant(#[from] PlanInvariantError),
}

impl ConfigError {
    fn from_toml(text: &str, e: toml::de::Error) -> Self {
        let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        ConfigError::Parse { line, message: e.message().to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub option: PlanOption,
    pub execution_mode: Mode,
    pub arch: Arch,
    #[serde(default)]
    pub max_mask: u8,
    pub dwt_comparators: usize,
    #[serde(with = "crate::addr::hex64")]
    pub required_code_alignment: u64,
    pub code: AddrRange,
    pub code_chunks: Vec<AddrRange>,
    pub boot: Vec<RegisterWrite>,
}

impl PlanDocument {
    pub fn from_plan(plan: &ProtectionPlan) -> Self {
        PlanDocument {
            option: plan.option,
            execution_mode: plan.execution_mode,
            arch: plan.dwt.arch(),
            max_mask: plan.dwt.max_mask(),
            dwt_comparators: plan.dwt.budget(),
            required_code_alignment: plan.required_code_alignment,
            code: plan.code,
            code_chunks: plan.code_chunks.clone(),
            boot: emit_boot_sequence(plan),
        }
    }

    /// Rebuilds the plan by replaying the boot writes, then checks the plan
    /// invariants.
    pub fn to_plan(&self) -> Result<ProtectionPlan, ConfigError> {
        let state = apply_boot_sequence(&self.boot, self.arch, self.max_mask, self.dwt_comparators)?;
        let plan = ProtectionPlan {
            option: self.option,
            execution_mode: self.execution_mode,
            code: self.code,
            mpu_regions: state.mpu_regions,
            dwt: state.dwt,
            required_code_alignment: self.required_code_alignment,
            code_chunks: self.code_chunks.clone(),
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<DeviceProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<FirmwareLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanDocument>,
}

impl ConfigDocument {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::from_toml(text, e))
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("config documents always serialize")
    }

    pub fn profile(&self) -> Result<&DeviceProfile, ConfigError> {
        self.profile.as_ref().ok_or(ConfigError::MissingSection("profile"))
    }

    pub fn layout(&self) -> Result<&FirmwareLayout, ConfigError> {
        self.layout.as_ref().ok_or(ConfigError::MissingSection("layout"))
    }

    pub fn protection_plan(&self) -> Result<ProtectionPlan, ConfigError> {
        self.plan.as_ref().ok_or(ConfigError::MissingSection("plan"))?.to_plan()
    }
}
