use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub used: u64,
    pub allowed: u64,
}

impl Account {
    pub fn remaining(&self) -> u64 {
        self.allowed - self.used
    }
}

/// Per-client query budgets. Usage only grows and never exceeds the
/// allowance: a charge that does not fit is refused whole.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    accounts: BTreeMap<String, Account>,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register `client` with `allowed` queries. Re-registering keeps the
    /// usage already recorded and never lowers the allowance below it.
    pub fn register(&mut self, client: impl Into<String>, allowed: u64) {
        let acct = self.accounts.entry(client.into()).or_insert(Account { used: 0, allowed });
        acct.allowed = allowed.max(acct.used);
    }

    pub fn account(&self, client: &str) -> Option<Account> {
        self.accounts.get(client).copied()
    }

    pub fn remaining(&self, client: &str) -> Option<u64> {
        self.account(client).map(|a| a.remaining())
    }

    /// Charge `n` queries to `client`; on success returns what is left.
    pub fn charge(&mut self, client: &str, n: u64) -> Result<u64> {
        let acct = self
            .accounts
            .get_mut(client)
            .ok_or_else(|| Error::UnknownClient(client.to_string()))?;
        if n > acct.remaining() {
            return Err(Error::BudgetExceeded {
                remaining: acct.remaining(),
            });
        }
        acct.used += n;
        Ok(acct.remaining())
    }

    pub fn clients(&self) -> impl Iterator<Item = (&str, &Account)> {
        self.accounts.iter().map(|(k, v)| (k.as_str(), v))
    }
}
