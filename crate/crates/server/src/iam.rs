//! Accounts, federations, invitations and bearer tokens.
//!
//! Tokens are random 256-bit strings handed out once; only their sha256 is
//! kept. Passwords are stored as argon2id PHC strings.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use chrono::{DateTime, Duration, Utc};
use fedsilo_core::api::{
    AccountView, CreateAccountRequest, FederationView, LoginRequest, Membership, MembershipStatus,
    Role, TokenResponse, WhoAmI,
};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;

use crate::blobs::sha256_hex;
use crate::clock::Clock;
use crate::error::{ApiError, ApiResult};
use crate::store::Store;

pub const MIN_PASSWORD_LEN: usize = 10;
const TOKEN_PREFIX: &str = "fs_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Api,
    Agent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Account {
    account_id: String,
    display_name: String,
    email: String,
    password_hash: String,
    created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Federation {
    federation_id: String,
    name: String,
    admin_id: String,
    members: Vec<Membership>,
    created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenRecord {
    token_hash: String,
    account_id: String,
    scopes: BTreeSet<Scope>,
    #[serde(default)]
    expires_at: Option<DateTime<Utc>>,
    /// Agent tokens are bound to one endpoint of one federation.
    #[serde(default)]
    endpoint_id: Option<String>,
    #[serde(default)]
    federation_id: Option<String>,
    #[serde(default)]
    revoked: bool,
}

/// The authenticated caller of a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub account_id: String,
    pub scopes: BTreeSet<Scope>,
    pub endpoint_id: Option<String>,
    pub federation_id: Option<String>,
    token_hash: String,
}

impl Principal {
    pub fn has_scope(&self, scope: Scope) -> bool {
        self.scopes.contains(&scope)
    }

    /// Fails with Forbidden unless the token carries `scope`.
    pub fn require(&self, scope: Scope) -> ApiResult<()> {
        if self.has_scope(scope) {
            Ok(())
        } else {
            Err(ApiError::forbidden(format!(
                "token lacks the {} scope",
                match scope {
                    Scope::Api => "api",
                    Scope::Agent => "agent",
                }
            )))
        }
    }

    /// For agent tokens: the endpoint must be the one the token was issued for.
    pub fn require_endpoint(&self, endpoint_id: &str) -> ApiResult<()> {
        self.require(Scope::Agent)?;
        match &self.endpoint_id {
            Some(bound) if bound == endpoint_id => Ok(()),
            _ => Err(ApiError::Unauthorized),
        }
    }
}

#[derive(Default)]
struct Inner {
    accounts: HashMap<String, Account>,
    by_email: HashMap<String, String>,
    federations: HashMap<String, Federation>,
    tokens: HashMap<String, TokenRecord>,
}

pub struct Iam {
    store: Store,
    clock: Arc<dyn Clock>,
    token_ttl: Duration,
    inner: RwLock<Inner>,
    /// Verified against when the email is unknown, so both failure paths cost
    /// one argon2 verification.
    dummy_hash: String,
}

fn normalize_email(email: &str) -> String {
    email.trim().to_ascii_lowercase()
}

fn hash_password(password: &str) -> ApiResult<String> {
    let mut raw = [0u8; 16];
    rand::rng().fill_bytes(&mut raw);
    let salt = SaltString::encode_b64(&raw).expect("16 bytes is a valid salt");
    Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(ApiError::internal)
}

fn verify_password(password: &str, phc: &str) -> bool {
    PasswordHash::new(phc)
        .map(|parsed| {
            Argon2::default()
                .verify_password(password.as_bytes(), &parsed)
                .is_ok()
        })
        .unwrap_or(false)
}

fn new_token() -> String {
    let mut bytes = [0u8; 32];
    rand::rng().fill_bytes(&mut bytes);
    format!("{TOKEN_PREFIX}{}", hex::encode(bytes))
}

impl Iam {
    pub fn open(store: Store, clock: Arc<dyn Clock>, token_ttl: Duration) -> ApiResult<Self> {
        let mut inner = Inner::default();
        for a in store.list::<Account>("accounts")? {
            inner.by_email.insert(a.email.clone(), a.account_id.clone());
            inner.accounts.insert(a.account_id.clone(), a);
        }
        for f in store.list::<Federation>("federations")? {
            inner.federations.insert(f.federation_id.clone(), f);
        }
        for t in store.list::<TokenRecord>("tokens")? {
            inner.tokens.insert(t.token_hash.clone(), t);
        }
        Ok(Self {
            store,
            clock,
            token_ttl,
            inner: RwLock::new(inner),
            dummy_hash: hash_password("not-a-real-password")?,
        })
    }

    pub fn create_account(&self, req: &CreateAccountRequest) -> ApiResult<AccountView> {
        let email = normalize_email(&req.email);
        if email.is_empty() || !email.contains('@') {
            return Err(ApiError::InvalidRequest("email must look like name@host".into()));
        }
        if req.display_name.trim().is_empty() {
            return Err(ApiError::InvalidRequest("display_name must not be empty".into()));
        }
        if req.password.chars().count() < MIN_PASSWORD_LEN {
            return Err(ApiError::WeakPassword(MIN_PASSWORD_LEN));
        }
        if self.inner.read().unwrap().by_email.contains_key(&email) {
            return Err(ApiError::DuplicateEmail);
        }
        let password_hash = hash_password(&req.password)?;
        let mut inner = self.inner.write().unwrap();
        if inner.by_email.contains_key(&email) {
            return Err(ApiError::DuplicateEmail);
        }
        let account = Account {
            account_id: uuid::Uuid::new_v4().to_string(),
            display_name: req.display_name.trim().to_string(),
            email: email.clone(),
            password_hash,
            created_at: self.clock.now(),
        };
        self.store.put("accounts", &account.account_id, &account)?;
        inner.by_email.insert(email, account.account_id.clone());
        let view = view_of(&account);
        inner.accounts.insert(account.account_id.clone(), account);
        Ok(view)
    }

    pub fn login(&self, req: &LoginRequest) -> ApiResult<TokenResponse> {
        let email = normalize_email(&req.email);
        let account = {
            let inner = self.inner.read().unwrap();
            inner
                .by_email
                .get(&email)
                .and_then(|id| inner.accounts.get(id))
                .cloned()
        };
        let Some(account) = account else {
            verify_password(&req.password, &self.dummy_hash);
            return Err(ApiError::BadCredentials);
        };
        if !verify_password(&req.password, &account.password_hash) {
            return Err(ApiError::BadCredentials);
        }
        let expires_at = self.clock.now() + self.token_ttl;
        let token = self.insert_token(TokenRecord {
            token_hash: String::new(),
            account_id: account.account_id.clone(),
            scopes: BTreeSet::from([Scope::Api]),
            expires_at: Some(expires_at),
            endpoint_id: None,
            federation_id: None,
            revoked: false,
        })?;
        Ok(TokenResponse {
            token,
            account_id: account.account_id,
            expires_at,
        })
    }

    fn insert_token(&self, mut record: TokenRecord) -> ApiResult<String> {
        let token = new_token();
        record.token_hash = sha256_hex(token.as_bytes());
        self.store.put("tokens", &record.token_hash, &record)?;
        self.inner
            .write()
            .unwrap()
            .tokens
            .insert(record.token_hash.clone(), record);
        Ok(token)
    }

    /// A long-lived token with only the agent scope, bound to one endpoint.
    pub fn issue_agent_token(
        &self,
        account_id: &str,
        federation_id: &str,
        endpoint_id: &str,
    ) -> ApiResult<String> {
        self.insert_token(TokenRecord {
            token_hash: String::new(),
            account_id: account_id.to_string(),
            scopes: BTreeSet::from([Scope::Agent]),
            expires_at: None,
            endpoint_id: Some(endpoint_id.to_string()),
            federation_id: Some(federation_id.to_string()),
            revoked: false,
        })
    }

    pub fn authenticate(&self, token: &str) -> ApiResult<Principal> {
        if !token.starts_with(TOKEN_PREFIX) {
            return Err(ApiError::Unauthorized);
        }
        let hash = sha256_hex(token.as_bytes());
        let inner = self.inner.read().unwrap();
        let record = inner.tokens.get(&hash).ok_or(ApiError::Unauthorized)?;
        if !bool::from(record.token_hash.as_bytes().ct_eq(hash.as_bytes())) || record.revoked {
            return Err(ApiError::Unauthorized);
        }
        if record.expires_at.is_some_and(|t| t <= self.clock.now()) {
            return Err(ApiError::Unauthorized);
        }
        if !inner.accounts.contains_key(&record.account_id) {
            return Err(ApiError::Unauthorized);
        }
        Ok(Principal {
            account_id: record.account_id.clone(),
            scopes: record.scopes.clone(),
            endpoint_id: record.endpoint_id.clone(),
            federation_id: record.federation_id.clone(),
            token_hash: hash,
        })
    }

    fn revoke_where(&self, pred: impl Fn(&TokenRecord) -> bool) -> ApiResult<Vec<String>> {
        let mut inner = self.inner.write().unwrap();
        let mut endpoints = Vec::new();
        for record in inner.tokens.values_mut() {
            if !record.revoked && pred(record) {
                record.revoked = true;
                self.store.put("tokens", &record.token_hash, &*record)?;
                endpoints.extend(record.endpoint_id.clone());
            }
        }
        Ok(endpoints)
    }

    pub fn logout(&self, principal: &Principal) -> ApiResult<()> {
        self.revoke_where(|r| r.token_hash == principal.token_hash)
            .map(|_| ())
    }

    /// Revokes every agent token bound to `endpoint_id`.
    pub fn revoke_endpoint(&self, endpoint_id: &str) -> ApiResult<()> {
        self.revoke_where(|r| r.endpoint_id.as_deref() == Some(endpoint_id))
            .map(|_| ())
    }

    /// Returns the active membership of `account_id` in `federation_id`, if any.
    fn active_role(inner: &Inner, account_id: &str, federation_id: &str) -> Option<Role> {
        inner.federations.get(federation_id).and_then(|f| {
            f.members
                .iter()
                .find(|m| m.account_id == account_id && m.status == MembershipStatus::Active)
                .map(|m| m.role)
        })
    }

    /// Checks scope, active membership and role. Agent tokens additionally
    /// only ever act inside the federation they were issued for.
    pub fn authorize(
        &self,
        principal: &Principal,
        federation_id: &str,
        role: Role,
        scope: Scope,
    ) -> ApiResult<String> {
        principal.require(scope)?;
        if scope == Scope::Agent && principal.federation_id.as_deref() != Some(federation_id) {
            return Err(ApiError::forbidden("agent token belongs to another federation"));
        }
        let inner = self.inner.read().unwrap();
        match Self::active_role(&inner, &principal.account_id, federation_id) {
            None => Err(ApiError::forbidden(format!(
                "not an active member of federation {federation_id}"
            ))),
            Some(have) if have < role => Err(ApiError::NotAdmin),
            Some(_) => Ok(principal.account_id.clone()),
        }
    }

    pub fn create_federation(&self, principal: &Principal, name: &str) -> ApiResult<FederationView> {
        principal.require(Scope::Api)?;
        if name.trim().is_empty() {
            return Err(ApiError::InvalidRequest("federation name must not be empty".into()));
        }
        let federation = Federation {
            federation_id: uuid::Uuid::new_v4().to_string(),
            name: name.trim().to_string(),
            admin_id: principal.account_id.clone(),
            members: vec![Membership {
                account_id: principal.account_id.clone(),
                role: Role::Admin,
                status: MembershipStatus::Active,
                email: None,
                display_name: None,
            }],
            created_at: self.clock.now(),
        };
        self.store
            .put("federations", &federation.federation_id, &federation)?;
        let mut inner = self.inner.write().unwrap();
        inner
            .federations
            .insert(federation.federation_id.clone(), federation.clone());
        Ok(federation_view(&inner, &federation))
    }

    pub fn invite(&self, principal: &Principal, federation_id: &str, email: &str) -> ApiResult<Membership> {
        self.authorize(principal, federation_id, Role::Admin, Scope::Api)?;
        let email = normalize_email(email);
        let mut inner = self.inner.write().unwrap();
        let invitee = inner
            .by_email
            .get(&email)
            .cloned()
            .ok_or_else(|| ApiError::NoSuchAccount(email.clone()))?;
        let federation = inner.federations.get_mut(federation_id).expect("authorized");
        if federation.members.iter().any(|m| m.account_id == invitee) {
            return Err(ApiError::AlreadyMember);
        }
        let membership = Membership {
            account_id: invitee,
            role: Role::Member,
            status: MembershipStatus::Invited,
            email: None,
            display_name: None,
        };
        federation.members.push(membership.clone());
        self.store.put("federations", federation_id, &*federation)?;
        Ok(membership)
    }

    pub fn accept(&self, principal: &Principal, federation_id: &str) -> ApiResult<Membership> {
        principal.require(Scope::Api)?;
        let mut inner = self.inner.write().unwrap();
        let federation = inner
            .federations
            .get_mut(federation_id)
            .ok_or(ApiError::NoSuchInvitation)?;
        let membership = federation
            .members
            .iter_mut()
            .find(|m| m.account_id == principal.account_id)
            .ok_or(ApiError::NoSuchInvitation)?;
        if membership.status == MembershipStatus::Active {
            return Err(ApiError::AlreadyMember);
        }
        membership.status = MembershipStatus::Active;
        let out = membership.clone();
        self.store.put("federations", federation_id, &*federation)?;
        Ok(out)
    }

    /// Removes a member (or withdraws an invitation) and revokes the agent
    /// tokens they hold in this federation. Returns the affected endpoints.
    pub fn remove_member(
        &self,
        principal: &Principal,
        federation_id: &str,
        account_id: &str,
    ) -> ApiResult<Vec<String>> {
        self.authorize(principal, federation_id, Role::Admin, Scope::Api)?;
        {
            let mut inner = self.inner.write().unwrap();
            let federation = inner.federations.get_mut(federation_id).expect("authorized");
            if federation.admin_id == account_id {
                return Err(ApiError::Conflict("the admin cannot be removed".into()));
            }
            let before = federation.members.len();
            federation.members.retain(|m| m.account_id != account_id);
            if federation.members.len() == before {
                return Err(ApiError::NoSuchAccount(account_id.to_string()));
            }
            self.store.put("federations", federation_id, &*federation)?;
        }
        self.revoke_where(|r| {
            r.account_id == account_id && r.federation_id.as_deref() == Some(federation_id)
        })
    }

    pub fn federation(&self, principal: &Principal, federation_id: &str) -> ApiResult<FederationView> {
        self.authorize(principal, federation_id, Role::Member, Scope::Api)?;
        let inner = self.inner.read().unwrap();
        Ok(federation_view(&inner, &inner.federations[federation_id]))
    }

    /// Federations where the account is an active member.
    pub fn active_federations(&self, account_id: &str) -> Vec<String> {
        let inner = self.inner.read().unwrap();
        let mut ids: Vec<String> = inner
            .federations
            .values()
            .filter(|f| Self::active_role(&inner, account_id, &f.federation_id).is_some())
            .map(|f| f.federation_id.clone())
            .collect();
        ids.sort();
        ids
    }

    pub fn is_admin(&self, account_id: &str, federation_id: &str) -> bool {
        let inner = self.inner.read().unwrap();
        Self::active_role(&inner, account_id, federation_id) == Some(Role::Admin)
    }

    pub fn whoami(&self, principal: &Principal) -> ApiResult<WhoAmI> {
        principal.require(Scope::Api)?;
        let inner = self.inner.read().unwrap();
        let account = inner
            .accounts
            .get(&principal.account_id)
            .ok_or(ApiError::Unauthorized)?;
        let mut federations = Vec::new();
        let mut invitations = Vec::new();
        let mut all: Vec<&Federation> = inner.federations.values().collect();
        all.sort_by(|a, b| (a.created_at, &a.federation_id).cmp(&(b.created_at, &b.federation_id)));
        for f in all {
            match f.members.iter().find(|m| m.account_id == account.account_id) {
                Some(m) if m.status == MembershipStatus::Active => {
                    federations.push(federation_view(&inner, f))
                }
                Some(_) => invitations.push(FederationView {
                    members: Vec::new(),
                    ..federation_view(&inner, f)
                }),
                None => {}
            }
        }
        Ok(WhoAmI {
            account: view_of(account),
            federations,
            invitations,
        })
    }
}

fn view_of(account: &Account) -> AccountView {
    AccountView {
        account_id: account.account_id.clone(),
        display_name: account.display_name.clone(),
        email: account.email.clone(),
    }
}

fn federation_view(inner: &Inner, f: &Federation) -> FederationView {
    FederationView {
        federation_id: f.federation_id.clone(),
        name: f.name.clone(),
        admin_id: f.admin_id.clone(),
        members: f
            .members
            .iter()
            .map(|m| {
                let account = inner.accounts.get(&m.account_id);
                Membership {
                    email: account.map(|a| a.email.clone()),
                    display_name: account.map(|a| a.display_name.clone()),
                    ..m.clone()
                }
            })
            .collect(),
        created_at: f.created_at,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn setup() -> (tempfile::TempDir, Arc<ManualClock>, Iam) {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(Utc::now()));
        let iam = Iam::open(Store::open(dir.path()).unwrap(), clock.clone(), Duration::hours(24)).unwrap();
        (dir, clock, iam)
    }

    fn account(iam: &Iam, email: &str) -> Principal {
        iam.create_account(&CreateAccountRequest {
            display_name: email.into(),
            email: email.into(),
            password: "correct horse battery".into(),
        })
        .unwrap();
        let t = iam
            .login(&LoginRequest {
                email: email.into(),
                password: "correct horse battery".into(),
            })
            .unwrap();
        iam.authenticate(&t.token).unwrap()
    }

    #[test]
    fn accounts_and_login() {
        let (_d, clock, iam) = setup();
        let req = CreateAccountRequest {
            display_name: "Ada".into(),
            email: "ada@lab.org".into(),
            password: "0123456789".into(),
        };
        iam.create_account(&req).unwrap();
        assert!(matches!(iam.create_account(&req), Err(ApiError::DuplicateEmail)));
        let weak = CreateAccountRequest {
            password: "abc".into(),
            email: "x@y".into(),
            ..req.clone()
        };
        assert!(matches!(iam.create_account(&weak), Err(ApiError::WeakPassword(10))));

        let wrong = LoginRequest {
            email: "ada@lab.org".into(),
            password: "nope-nope-nope".into(),
        };
        let unknown = LoginRequest {
            email: "bob@lab.org".into(),
            password: "0123456789".into(),
        };
        assert_eq!(iam.login(&wrong).unwrap_err().code(), "bad_credentials");
        assert_eq!(iam.login(&unknown).unwrap_err().code(), "bad_credentials");

        let ok = iam
            .login(&LoginRequest {
                email: "ADA@lab.org ".into(),
                password: "0123456789".into(),
            })
            .unwrap();
        assert!(iam.authenticate(&ok.token).is_ok());
        clock.advance(Duration::hours(25));
        assert!(matches!(iam.authenticate(&ok.token), Err(ApiError::Unauthorized)));
    }

    #[test]
    fn tokens_are_not_stored_in_clear() {
        let (dir, _c, iam) = setup();
        let p = account(&iam, "a@x.org");
        let tokens = std::fs::read_dir(dir.path().join("meta/tokens")).unwrap();
        for entry in tokens {
            let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
            assert!(!text.contains(TOKEN_PREFIX), "{text}");
            assert!(text.contains(&p.token_hash));
        }
    }

    #[test]
    fn federation_membership_flow() {
        let (_d, _c, iam) = setup();
        let admin = account(&iam, "admin@x.org");
        let bob = account(&iam, "bob@x.org");
        let fed = iam.create_federation(&admin, "midrc").unwrap();
        assert_eq!(fed.members.len(), 1);
        let fid = fed.federation_id.as_str();

        assert!(matches!(iam.invite(&bob, fid, "admin@x.org"), Err(ApiError::Forbidden(_))));
        assert!(matches!(iam.accept(&bob, fid), Err(ApiError::NoSuchInvitation)));
        iam.invite(&admin, fid, "bob@x.org").unwrap();
        assert!(matches!(iam.invite(&admin, fid, "bob@x.org"), Err(ApiError::AlreadyMember)));
        // invited but not accepted: no access
        assert!(iam.authorize(&bob, fid, Role::Member, Scope::Api).is_err());
        iam.accept(&bob, fid).unwrap();
        assert_eq!(iam.authorize(&bob, fid, Role::Member, Scope::Api).unwrap(), bob.account_id);
        assert!(matches!(
            iam.authorize(&bob, fid, Role::Admin, Scope::Api),
            Err(ApiError::NotAdmin)
        ));
        assert!(matches!(iam.invite(&bob, fid, "admin@x.org"), Err(ApiError::NotAdmin)));

        let other = iam.create_federation(&bob, "midrc").unwrap();
        assert_ne!(other.federation_id, fed.federation_id);
        assert!(iam.authorize(&admin, &other.federation_id, Role::Member, Scope::Api).is_err());
    }

    #[test]
    fn agent_tokens_are_scoped_and_revocable() {
        let (_d, _c, iam) = setup();
        let admin = account(&iam, "admin@x.org");
        let bob = account(&iam, "bob@x.org");
        let fed = iam.create_federation(&admin, "f").unwrap();
        let fid = fed.federation_id.as_str();
        iam.invite(&admin, fid, "bob@x.org").unwrap();
        iam.accept(&bob, fid).unwrap();
        let raw = iam.issue_agent_token(&bob.account_id, fid, "ep1").unwrap();
        let agent = iam.authenticate(&raw).unwrap();
        assert!(agent.require_endpoint("ep1").is_ok());
        assert!(agent.require_endpoint("ep2").is_err());
        assert!(iam.authorize(&agent, fid, Role::Member, Scope::Api).is_err());
        assert!(iam.authorize(&agent, fid, Role::Member, Scope::Agent).is_ok());

        let affected = iam.remove_member(&admin, fid, &bob.account_id).unwrap();
        assert_eq!(affected, vec!["ep1".to_string()]);
        assert!(iam.authenticate(&raw).is_err());
    }

    #[test]
    fn state_survives_reopen() {
        let (dir, clock, iam) = setup();
        let admin = account(&iam, "admin@x.org");
        let fed = iam.create_federation(&admin, "f").unwrap();
        drop(iam);
        let iam = Iam::open(Store::open(dir.path()).unwrap(), clock, Duration::hours(24)).unwrap();
        assert!(iam.federation(&admin, &fed.federation_id).is_ok());
        assert!(iam.authenticate("fs_bogus").is_err());
    }
}
